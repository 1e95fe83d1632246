//! Time evolution and finite-time scattering diagnostics.
//!
//! One adaptive Krylov exponential drives every propagation: each step is
//! accepted only when two nested Lanczos orders agree below the step
//! tolerance, so a finished run carries a certified error budget together
//! with conserved-quantity drifts. On top of the propagator sit the
//! emission-rate integrand whose time integral controls wave-operator
//! Cauchy differences, photon position counters built from a discrete
//! one-particle position operator, and a finite direct-integral stack that
//! resolves the total momentum and tracks the center-of-mass escape.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::commutator::lift_fock;
use crate::fiber::{Dispersion, FiberOperator, FiberSpace};
use crate::fock::second_quantize_offdiag;
use crate::grid::{quintic_step, ModeGrid};
use crate::linalg::lapack::{stevr, syev_full, EigRange};
use crate::linalg::{self, C64, HermBuilder, HermOp, LinOp, ZERO};
use crate::{Error, Result};

/// Norm drift allowed over a whole run.
const NORM_DRIFT_TOL: f64 = 1e-8;
/// Energy drift allowed over a whole run, relative to max(1, |E|).
const ENERGY_DRIFT_TOL: f64 = 1e-8;
/// Soft-occupation drift allowed over a whole run.
const SOFT_DRIFT_TOL: f64 = 1e-10;
/// Error charged to a step that closed an exact invariant subspace.
const BREAKDOWN_EST: f64 = 1e-14;
/// Convergence demanded of an energy-window filter application.
const FILTER_TOL: f64 = 1e-6;

/// Knobs of the adaptive exponential stepper.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepControl {
    /// Certified local error accepted per step.
    pub tol: f64,
    /// Krylov order used per step; the certificate compares it against a
    /// four-smaller order, so at least 12 is required.
    pub max_order: usize,
    /// Largest step taken regardless of the estimate.
    pub dt_max: f64,
    /// Consecutive rejections tolerated before the run aborts.
    pub max_rejects: usize,
    /// Krylov order used when applying energy-window functions.
    pub filter_order: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl { tol: 1e-9, max_order: 32, dt_max: 1.0, max_rejects: 60, filter_order: 220 }
    }
}

impl StepControl {
    pub fn validate(&self) -> Result<()> {
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::config("steps.tol", "must be positive"));
        }
        if self.max_order < 12 {
            return Err(Error::config("steps.max_order", "need at least 12 to certify steps"));
        }
        if !self.dt_max.is_finite() || self.dt_max <= 0.0 {
            return Err(Error::config("steps.dt_max", "must be positive"));
        }
        if self.filter_order < 12 {
            return Err(Error::config("steps.filter_order", "need at least 12"));
        }
        Ok(())
    }
}

/// Lanczos data for one starting vector: orthonormal basis columns and the
/// real tridiagonal projection. `breakdown` marks an exactly closed
/// invariant subspace.
struct LanczosData {
    basis: Vec<Vec<C64>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    breakdown: bool,
}

fn lanczos_run(h: &dyn LinOp, v0: Vec<C64>, max_order: usize) -> LanczosData {
    let dim = v0.len();
    let order = max_order.min(dim);
    let mut basis = vec![v0];
    let mut alpha = Vec::with_capacity(order);
    let mut beta = Vec::with_capacity(order);
    let mut breakdown = false;
    let mut scale = 0.0f64;
    let mut w = vec![ZERO; dim];
    for j in 0..order {
        h.apply(&basis[j], &mut w);
        let aj = linalg::dot(&basis[j], &w).re;
        alpha.push(aj);
        scale = scale.max(aj.abs());
        if j + 1 == order {
            break;
        }
        // One full reorthogonalization pass keeps the basis numerically
        // orthonormal at the small orders used here.
        for b in &basis {
            let c = linalg::dot(b, &w);
            linalg::axpy(-c, b, &mut w);
        }
        let bj = linalg::norm(&w);
        if bj <= 1e-12 * (scale + 1.0) {
            breakdown = true;
            break;
        }
        beta.push(bj);
        scale = scale.max(bj);
        let mut v = w.clone();
        linalg::scale(C64::new(1.0 / bj, 0.0), &mut v);
        basis.push(v);
    }
    LanczosData { basis, alpha, beta, breakdown }
}

/// First column of `map(T)` for the real symmetric tridiagonal `T`.
fn tridiag_function(alpha: &[f64], beta: &[f64], map: impl Fn(f64) -> C64) -> Result<Vec<C64>> {
    let m = alpha.len();
    if m == 1 {
        return Ok(vec![map(alpha[0])]);
    }
    let (vals, vecs) = stevr(alpha, beta, &EigRange::Index(1, m))?;
    let mut y = vec![ZERO; m];
    for (e, lam) in vals.iter().enumerate() {
        let wgt = map(*lam) * vecs[e * m];
        for (yj, vj) in y.iter_mut().zip(&vecs[e * m..(e + 1) * m]) {
            *yj += wgt * *vj;
        }
    }
    Ok(y)
}

fn assemble_from_basis(basis: &[Vec<C64>], coeff: &[C64], scale: f64, dim: usize) -> Vec<C64> {
    let mut out = vec![ZERO; dim];
    for (c, v) in coeff.iter().zip(basis) {
        linalg::axpy(*c * scale, v, &mut out);
    }
    out
}

fn padded_distance(full: &[C64], reduced: &[C64]) -> f64 {
    full.iter()
        .enumerate()
        .map(|(j, y)| {
            let r = if j < reduced.len() { reduced[j] } else { ZERO };
            (*y - r).norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}

/// One exponential step `exp(-i dt H) x` with an internal certificate: the
/// result at the full order is compared against the order reduced by four.
fn exp_step(h: &dyn LinOp, x: &[C64], dt: f64, max_order: usize) -> Result<(Vec<C64>, f64)> {
    let beta0 = linalg::norm(x);
    if beta0 == 0.0 {
        return Ok((vec![ZERO; x.len()], 0.0));
    }
    let mut v0 = x.to_vec();
    linalg::scale(C64::new(1.0 / beta0, 0.0), &mut v0);
    let lz = lanczos_run(h, v0, max_order);
    let m = lz.alpha.len();
    let phase = |lam: f64| C64::new(0.0, -lam * dt).exp();
    let y = tridiag_function(&lz.alpha, &lz.beta[..m - 1], phase)?;
    let est = if lz.breakdown || m == x.len() || m < 8 {
        BREAKDOWN_EST * beta0
    } else {
        let k = m - 4;
        let y_red = tridiag_function(&lz.alpha[..k], &lz.beta[..k - 1], phase)?;
        padded_distance(&y, &y_red) * beta0
    };
    Ok((assemble_from_basis(&lz.basis, &y, beta0, x.len()), est))
}

#[derive(Debug, Default, Clone, Copy)]
struct MarchLog {
    steps: usize,
    rejects: usize,
    budget: f64,
    max_err: f64,
}

/// Advance `state` by the signed time `span`, adapting the step size until
/// every accepted step meets the tolerance. The hint carries the step size
/// across calls so successive intervals do not restart the adaptation.
fn march(
    h: &dyn LinOp,
    state: &mut Vec<C64>,
    span: f64,
    dt_hint: &mut f64,
    ctrl: &StepControl,
    log: &mut MarchLog,
) -> Result<()> {
    if span == 0.0 {
        return Ok(());
    }
    let sign = span.signum();
    let total = span.abs();
    let mut remaining = total;
    let mut consecutive = 0usize;
    while remaining > 0.0 {
        let dt = dt_hint.min(remaining);
        let (cand, est) = exp_step(h, state, sign * dt, ctrl.max_order)?;
        if est <= ctrl.tol {
            *state = cand;
            remaining -= dt;
            if remaining < 1e-12 * total {
                remaining = 0.0;
            }
            consecutive = 0;
            log.steps += 1;
            log.budget += est;
            log.max_err = log.max_err.max(est);
            if est < 0.05 * ctrl.tol {
                *dt_hint = (dt * 1.5).min(ctrl.dt_max);
            }
        } else {
            consecutive += 1;
            log.rejects += 1;
            *dt_hint = dt * 0.5;
            if consecutive > ctrl.max_rejects {
                return Err(Error::refusal(format!(
                    "step control collapsed after {consecutive} rejections: dt {dt:.3e} \
                     still carries local error {est:.3e} against tolerance {:.1e} \
                     with {remaining:.3e} time units left",
                    ctrl.tol
                )));
            }
        }
    }
    Ok(())
}

fn diag_expectation(diag: &[f64], x: &[C64]) -> f64 {
    diag.iter().zip(x).map(|(d, z)| d * z.norm_sqr()).sum()
}

fn check_times_increasing(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::config("times", "need at least one sample"));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::config("times", "samples must be finite"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("times", "samples must be strictly increasing"));
    }
    Ok(())
}

/// A finished propagation: states at the requested times plus the error
/// certificate and the conserved-quantity drifts measured along the way.
#[derive(Debug, Clone)]
pub struct PropagationRun {
    pub times: Vec<f64>,
    pub states: Vec<Vec<C64>>,
    pub step_count: usize,
    pub reject_count: usize,
    /// Sum of the per-step certified error estimates.
    pub error_budget: f64,
    /// Cumulative budget at each output time.
    pub budget_at: Vec<f64>,
    pub max_step_error: f64,
    pub norm_drift: f64,
    pub energy_drift: f64,
    pub soft_drift: f64,
    pub operator_hash: String,
}

/// Evolve `psi0`, given at `times[0]`, through the remaining sample times.
///
/// The run aborts if the adaptive stepper cannot meet the tolerance, and a
/// finished run is rejected when the norm, energy, or soft-occupation
/// drifts exceed their hard bounds, so a returned value is always a
/// certified propagation.
pub fn propagate(
    op: &FiberOperator,
    psi0: &[C64],
    times: &[f64],
    ctrl: &StepControl,
) -> Result<PropagationRun> {
    ctrl.validate()?;
    check_times_increasing(times)?;
    if psi0.len() != op.dim() {
        return Err(Error::config("state", "dimension does not match the operator"));
    }
    let n0 = linalg::norm(psi0);
    if (n0 - 1.0).abs() > 1e-8 {
        return Err(Error::refusal(format!(
            "initial state must arrive normalized, got norm {n0:.12}"
        )));
    }
    let soft = op.space.soft_number_diag();
    let e0 = op.expectation(psi0);
    let s0 = diag_expectation(&soft, psi0);

    let mut state = psi0.to_vec();
    let mut dt_hint = ctrl.dt_max;
    let mut log = MarchLog::default();
    let mut states = Vec::with_capacity(times.len());
    let mut budget_at = Vec::with_capacity(times.len());
    let (mut norm_drift, mut energy_drift, mut soft_drift) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &t) in times.iter().enumerate() {
        if i > 0 {
            march(op, &mut state, t - times[i - 1], &mut dt_hint, ctrl, &mut log)?;
        }
        norm_drift = norm_drift.max((linalg::norm(&state) - 1.0).abs());
        energy_drift = energy_drift.max((op.expectation(&state) - e0).abs());
        soft_drift = soft_drift.max((diag_expectation(&soft, &state) - s0).abs());
        states.push(state.clone());
        budget_at.push(log.budget);
    }
    if norm_drift > NORM_DRIFT_TOL {
        return Err(Error::refusal(format!(
            "norm drifted by {norm_drift:.3e}, above the {NORM_DRIFT_TOL:.0e} bound"
        )));
    }
    if energy_drift > ENERGY_DRIFT_TOL * e0.abs().max(1.0) {
        return Err(Error::refusal(format!(
            "energy drifted by {energy_drift:.3e} against E = {e0:.6}"
        )));
    }
    if soft_drift > SOFT_DRIFT_TOL {
        return Err(Error::refusal(format!(
            "soft occupation drifted by {soft_drift:.3e}, above the {SOFT_DRIFT_TOL:.0e} bound"
        )));
    }
    Ok(PropagationRun {
        times: times.to_vec(),
        states,
        step_count: log.steps,
        reject_count: log.rejects,
        error_budget: log.budget,
        budget_at,
        max_step_error: log.max_err,
        norm_drift,
        energy_drift,
        soft_drift,
        operator_hash: op.hash.clone(),
    })
}

/// Apply `f(H)` to a vector through a single Lanczos space, returning the
/// result and the distance to the answer at a six-smaller order.
pub fn apply_filter(
    h: &dyn LinOp,
    f: impl Fn(f64) -> f64,
    x: &[C64],
    order: usize,
) -> Result<(Vec<C64>, f64)> {
    let beta0 = linalg::norm(x);
    if beta0 == 0.0 {
        return Ok((vec![ZERO; x.len()], 0.0));
    }
    let mut v0 = x.to_vec();
    linalg::scale(C64::new(1.0 / beta0, 0.0), &mut v0);
    let lz = lanczos_run(h, v0, order.max(2));
    let m = lz.alpha.len();
    let map = |lam: f64| C64::new(f(lam), 0.0);
    let y = tridiag_function(&lz.alpha, &lz.beta[..m - 1], map)?;
    let est = if lz.breakdown || m == x.len() || m < 12 {
        BREAKDOWN_EST * beta0
    } else {
        let k = m - 6;
        let y_red = tridiag_function(&lz.alpha[..k], &lz.beta[..k - 1], map)?;
        padded_distance(&y, &y_red) * beta0
    };
    Ok((assemble_from_basis(&lz.basis, &y, beta0, x.len()), est))
}

/// Smooth plateau equal to one on [lo, hi] with quintic edges of the given
/// width on both sides.
pub fn energy_window(lo: f64, hi: f64, edge: f64) -> impl Fn(f64) -> f64 {
    move |e: f64| {
        quintic_step((e - (lo - edge)) / edge) * (1.0 - quintic_step((e - hi) / edge))
    }
}

/// Largest matrix entry connecting states of different soft occupation.
/// The assembly keeps soft modes strictly diagonal, so this is exactly zero
/// and every function of the soft occupation numbers commutes with the
/// operator.
pub fn soft_commutant_defect(op: &FiberOperator) -> f64 {
    let soft = op.space.soft_number_diag();
    let mut worst = 0.0f64;
    for ((r, c), v) in op.op.rows.iter().zip(&op.op.cols).zip(&op.op.vals) {
        if soft[*r as usize] != soft[*c as usize] {
            worst = worst.max(v.norm());
        }
    }
    worst
}

/// Annihilation smeared with a continuum profile sampled on the grid: the
/// quadrature weight square roots are folded in here, and the profile
/// enters conjugated.
pub fn annihilate_profile(space: &FiberSpace, profile: &[C64], x: &[C64]) -> Vec<C64> {
    assert_eq!(profile.len(), space.grid.mode_count());
    assert_eq!(x.len(), space.dim());
    let n_at = space.n_orbitals();
    let fock = &space.fock;
    let mut y = vec![ZERO; x.len()];
    for s in 0..fock.dim() {
        for &(m, c) in fock.occs(s) {
            let hm = profile[m as usize];
            if hm == ZERO {
                continue;
            }
            let (t, n) = fock
                .with_removed(s, m as usize)
                .expect("occupied mode always admits removal");
            debug_assert_eq!(n, u32::from(c));
            let amp = hm.conj()
                * (space.grid.weights[m as usize].sqrt() * (n as f64).sqrt());
            for a in 0..n_at {
                y[t * n_at + a] += amp * x[s * n_at + a];
            }
        }
    }
    y
}

/// Adjoint of [`annihilate_profile`]: creation smeared with the profile.
/// Amplitudes that would leave the occupation cap are dropped.
pub fn create_profile(space: &FiberSpace, profile: &[C64], x: &[C64]) -> Vec<C64> {
    assert_eq!(profile.len(), space.grid.mode_count());
    assert_eq!(x.len(), space.dim());
    let n_at = space.n_orbitals();
    let fock = &space.fock;
    let mut y = vec![ZERO; x.len()];
    for s in 0..fock.dim() {
        for (m, &hm) in profile.iter().enumerate() {
            if hm == ZERO {
                continue;
            }
            if let Some((t, n1)) = fock.with_added(s, m) {
                let amp = hm * (space.grid.weights[m].sqrt() * (n1 as f64).sqrt());
                for a in 0..n_at {
                    y[t * n_at + a] += amp * x[s * n_at + a];
                }
            }
        }
    }
    y
}

/// Emission-rate series `s(t)` together with its power-law tail fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CookSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Per-point bound from the propagation budget and the contracted
    /// profile norm.
    pub errors: Vec<f64>,
    /// Fitted decay exponent of the tail, when enough of it is resolved.
    pub mu: Option<f64>,
    pub fit_residual: f64,
    pub fit_points: usize,
    /// False when the tail had too few usable points for a fit.
    pub tail_resolved: bool,
    /// Trapezoid integral of the series over the whole grid.
    pub integral: f64,
    pub coupling: f64,
}

impl CookSeries {
    /// Trapezoid integral of the series between two times inside the grid,
    /// with linear interpolation at the endpoints.
    pub fn integral_between(&self, t1: f64, t2: f64) -> f64 {
        let (a, b) = (t1.min(t2), t1.max(t2));
        let interp = |t: f64| -> f64 {
            match self.times.iter().position(|&x| x >= t) {
                Some(0) => self.values[0],
                Some(i) => {
                    let (t0, t1) = (self.times[i - 1], self.times[i]);
                    let u = (t - t0) / (t1 - t0);
                    self.values[i - 1] * (1.0 - u) + self.values[i] * u
                }
                None => *self.values.last().unwrap(),
            }
        };
        let mut knots: Vec<f64> = vec![a];
        knots.extend(self.times.iter().copied().filter(|&t| t > a && t < b));
        knots.push(b);
        knots
            .windows(2)
            .map(|w| 0.5 * (interp(w[0]) + interp(w[1])) * (w[1] - w[0]))
            .sum()
    }
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum()
}

fn power_law_tail(times: &[f64], values: &[f64]) -> (Option<f64>, f64, usize) {
    let t_last = *times.last().unwrap();
    let v_max = values.iter().cloned().fold(0.0f64, f64::max);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(&t, &v)| t >= 0.5 * t_last && t > 0.0 && v > 1e-13 * v_max.max(1e-300))
        .map(|(&t, &v)| (t.ln(), v.ln()))
        .collect();
    if pts.len() < 4 {
        return (None, 0.0, pts.len());
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return (None, 0.0, pts.len());
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let rms = (pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum::<f64>()
        / n)
        .sqrt();
    (Some(-slope), rms, pts.len())
}

/// Emission rate along a propagation: the coupling tensor is contracted
/// with the freely dephased profile `h e^{-i|k|t}` into a small orbital
/// matrix, and `s(t)` is the coupling times the norm of that matrix applied
/// to the evolved state.
///
/// A profile supported where the vertex vanishes, below the infrared scale
/// in particular, yields the exact zero series, and so does zero coupling.
pub fn cook_integrand(
    op: &FiberOperator,
    profile: &[C64],
    phi: &[C64],
    times: &[f64],
    ctrl: &StepControl,
) -> Result<CookSeries> {
    if profile.len() != op.space.grid.mode_count() {
        return Err(Error::config("cook.profile", "length must equal the mode count"));
    }
    check_times_increasing(times)?;
    if times[0] < 0.0 {
        return Err(Error::config("times", "emission series starts at nonnegative time"));
    }
    let prepend = times[0] > 0.0;
    let mut grid_times = Vec::with_capacity(times.len() + 1);
    if prepend {
        grid_times.push(0.0);
    }
    grid_times.extend_from_slice(times);
    let run = propagate(op, phi, &grid_times, ctrl)?;

    let space = &op.space;
    let n_at = space.n_orbitals();
    let omega = &space.grid.dispersion_free;
    let g = op.coupling;
    let skip = usize::from(prepend);
    let mut values = Vec::with_capacity(times.len());
    let mut errors = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let mut m_t: Array2<C64> = Array2::zeros((n_at, n_at));
        for (m, &hm) in profile.iter().enumerate() {
            if hm == ZERO {
                continue;
            }
            let w = space.grid.weights[m];
            let coeff = hm.conj() * C64::new(0.0, omega[m] * t).exp() * w;
            m_t.scaled_add(coeff, &space.tensor.blocks[m]);
        }
        let state = &run.states[i + skip];
        let mut applied = vec![ZERO; state.len()];
        for b in 0..state.len() / n_at {
            for ap in 0..n_at {
                let mut acc = ZERO;
                for aq in 0..n_at {
                    acc += m_t[(ap, aq)] * state[b * n_at + aq];
                }
                applied[b * n_at + ap] = acc;
            }
        }
        values.push(g.abs() * linalg::norm(&applied));
        let frob = m_t.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        errors.push(g.abs() * frob * run.budget_at[i + skip]);
    }
    let (mu, fit_residual, fit_points) = power_law_tail(times, &values);
    let integral = trapezoid(times, &values);
    Ok(CookSeries {
        times: times.to_vec(),
        values,
        errors,
        mu,
        fit_residual,
        fit_points,
        tail_resolved: mu.is_some(),
        integral,
        coupling: g,
    })
}

/// Eigendecomposition of the one-particle photon position operator, one
/// radial block per direction. The radial quadrature weight is already
/// folded into mode amplitudes, which turns the radial part of the
/// momentum-space Laplacian into the plain second difference with a hard
/// wall at zero frequency, so the squared position is a positive
/// constant-coefficient tridiagonal and its square roots give the position
/// values.
#[derive(Debug, Clone)]
pub struct PositionDecomposition {
    lines: Vec<Vec<usize>>,
    evals: Vec<Vec<f64>>,
    evecs: Vec<Vec<f64>>,
    r_count: usize,
    /// Largest resolved position value across directions.
    pub y_max: f64,
}

pub fn position_decomposition(grid: &ModeGrid) -> Result<PositionDecomposition> {
    let r = grid.radial_points.len();
    if r < 8 {
        return Err(Error::refusal(format!(
            "cannot resolve the photon position operator on {r} radial shells, need at least 8"
        )));
    }
    let h = grid.radial_step;
    let n_dirs = grid.directions.len();
    let mut lines = vec![vec![usize::MAX; r]; n_dirs];
    for q in 0..grid.mode_count() {
        lines[grid.angular_index[q] as usize][grid.radial_index[q] as usize] = q;
    }
    // Forward differences plus a wall bond at half-sample distance below
    // the first shell; the first samples sit at half steps, so the wall
    // segment is half as long and twice as stiff.
    let mut diag = vec![2.0 / (h * h); r];
    diag[0] = 3.0 / (h * h);
    diag[r - 1] = 1.0 / (h * h);
    let off = vec![-1.0 / (h * h); r - 1];
    let (vals, vecs) = stevr(&diag, &off, &EigRange::Index(1, r))?;
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let y_max = *roots.last().unwrap();
    let evals = vec![roots; n_dirs];
    let evecs = vec![vecs; n_dirs];
    Ok(PositionDecomposition { lines, evals, evecs, r_count: r, y_max })
}

impl PositionDecomposition {
    /// One-particle operator `f(|y|)` on the mode grid. Eigenvalue weights
    /// below 1e-15 are dropped, which keeps far-out counters sparse.
    pub fn weighted_op(&self, mode_count: usize, f: impl Fn(f64) -> f64) -> HermOp {
        let r = self.r_count;
        let mut b = HermBuilder::new(mode_count);
        let mut dense = vec![0.0f64; r * r];
        for (d, line) in self.lines.iter().enumerate() {
            dense.iter_mut().for_each(|x| *x = 0.0);
            let mut any = false;
            for e in 0..r {
                let fe = f(self.evals[d][e]);
                if fe.abs() < 1e-15 {
                    continue;
                }
                any = true;
                let col = &self.evecs[d][e * r..(e + 1) * r];
                for s in 0..r {
                    let x = fe * col[s];
                    if x == 0.0 {
                        continue;
                    }
                    for t in s..r {
                        dense[s * r + t] += x * col[t];
                    }
                }
            }
            if !any {
                continue;
            }
            for s in 0..r {
                b.add_diag(line[s], dense[s * r + s]);
                for t in s + 1..r {
                    let v = dense[s * r + t];
                    if v.abs() > 1e-15 {
                        b.add_offdiag(line[s], line[t], C64::new(v, 0.0));
                    }
                }
            }
        }
        b.finish()
    }

    /// Sharp spectral projection of a one-particle vector onto position
    /// values at or beyond the cut.
    pub fn tail_project(&self, r_cut: f64, vec: &[C64]) -> Vec<C64> {
        let r = self.r_count;
        let mut out = vec![ZERO; vec.len()];
        for (d, line) in self.lines.iter().enumerate() {
            for e in 0..r {
                if self.evals[d][e] < r_cut {
                    continue;
                }
                let col = &self.evecs[d][e * r..(e + 1) * r];
                let mut c = ZERO;
                for s in 0..r {
                    c += vec[line[s]] * col[s];
                }
                if c == ZERO {
                    continue;
                }
                for s in 0..r {
                    out[line[s]] += c * col[s];
                }
            }
        }
        out
    }
}

/// One row of the coupling-tail table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailRow {
    pub r_inner: f64,
    pub r_outer: f64,
    pub bound: f64,
}

/// Decay of the coupling beyond a photon position cut, uniformly over atom
/// positions inside the inner radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailTable {
    pub alpha: f64,
    pub rows: Vec<TailRow>,
    /// Fitted decay exponent in the separation, when resolvable.
    pub mu_fit: Option<f64>,
    pub y_max: f64,
}

/// Tail bounds `sup_x e^{-alpha|x|} |chi(|y| >= R') F_x|` with the atom
/// position `x` sampled inside the inner radius along every grid direction.
/// The coupling profile depends only on the discretization, never on the
/// coupling strength, so the whole table is independent of it.
pub fn interaction_tail(
    space: &FiberSpace,
    alpha: f64,
    pairs: &[(f64, f64)],
) -> Result<TailTable> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::config("tail.alpha", "must be positive"));
    }
    if pairs.is_empty() {
        return Err(Error::config("tail.pairs", "need at least one radius pair"));
    }
    let pos = position_decomposition(&space.grid)?;
    for &(ri, ro) in pairs {
        if !(ri.is_finite() && ro.is_finite() && 0.0 < ri && ri < ro) {
            return Err(Error::config("tail.pairs", "need 0 < inner < outer"));
        }
        if ro > 0.8 * pos.y_max {
            return Err(Error::refusal(format!(
                "outer radius {ro} is outside the resolved position range, \
                 the grid only reaches {:.2}",
                pos.y_max
            )));
        }
    }
    let grid = &space.grid;
    let a_e = space.atom.masses.electron_share();
    let a_n = space.atom.masses.nucleus_share();
    let n_modes = grid.mode_count();
    let mut kap_e = vec![0.0f64; n_modes];
    let mut kap_n = vec![0.0f64; n_modes];
    let mut sqw = vec![0.0f64; n_modes];
    for q in 0..n_modes {
        let s = grid.dispersion_free[q];
        kap_e[q] = space.ff.kappa_electron(s);
        kap_n[q] = space.ff.kappa_nucleus(s);
        sqw[q] = grid.weights[q].sqrt();
    }
    let dx = grid.radial_step.min(0.1);
    let mut rows = Vec::with_capacity(pairs.len());
    let mut fvec = vec![ZERO; n_modes];
    for &(ri, ro) in pairs {
        let n_x = ((ri / dx).ceil() as usize + 1).min(400);
        let mut bound = 0.0f64;
        for dir in &grid.directions {
            for j in 0..=n_x {
                let x_len = ri * j as f64 / n_x as f64;
                let x = [dir[0] * x_len, dir[1] * x_len, dir[2] * x_len];
                for q in 0..n_modes {
                    let k = grid.modes[q];
                    let kx = k[0] * x[0] + k[1] * x[1] + k[2] * x[2];
                    let e_part = C64::new(0.0, -a_e * kx).exp() * kap_e[q];
                    let n_part = C64::new(0.0, a_n * kx).exp() * kap_n[q];
                    fvec[q] = (e_part + n_part) * sqw[q];
                }
                let tail = pos.tail_project(ro, &fvec);
                bound = bound.max((-alpha * x_len).exp() * linalg::norm(&tail));
            }
        }
        rows.push(TailRow { r_inner: ri, r_outer: ro, bound });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.bound > 0.0)
        .map(|r| ((r.r_outer - r.r_inner).ln(), r.bound.ln()))
        .collect();
    let mu_fit = if pts.len() >= 3 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        (denom.abs() > 1e-12).then(|| -(n * sxy - sx * sy) / denom)
    } else {
        None
    };
    Ok(TailTable { alpha, rows, mu_fit, y_max: pos.y_max })
}

/// Ordered velocity scales used by the escape diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub gamma: f64,
}

impl Default for ScaleLadder {
    fn default() -> Self {
        ScaleLadder { beta: 0.3, beta1: 0.4, beta2: 0.5, beta3: 0.6, gamma: 0.7 }
    }
}

impl ScaleLadder {
    pub fn validate(&self) -> Result<()> {
        let s = [self.beta, self.beta1, self.beta2, self.beta3, self.gamma];
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("scales", "must be finite"));
        }
        if !(0.0 < s[0] && s[4] < 1.0) || s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "scales",
                "need 0 < beta < beta1 < beta2 < beta3 < gamma < 1",
            ));
        }
        Ok(())
    }
}

/// Series of a time-scaled observable with its tail diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub filter_error: f64,
    /// Largest successive change over the tail third of the series.
    pub cauchy_tail: f64,
    /// Smallest value over the tail third.
    pub liminf_tail: f64,
    pub settled: bool,
}

fn tail_stats(times: &[f64], values: &[f64]) -> (f64, f64, bool) {
    let n = times.len();
    let start = n.saturating_sub((n / 3).max(2)).min(n - 1);
    let mut cauchy = 0.0f64;
    for i in (start + 1)..n {
        cauchy = cauchy.max((values[i] - values[i - 1]).abs());
    }
    let liminf = values[start..].iter().cloned().fold(f64::INFINITY, f64::min);
    let settled = cauchy <= (0.05 * liminf).max(1e-6);
    (cauchy, liminf, settled)
}

/// Expected number of photons found beyond distance `gamma t` at time `t`,
/// after an energy-window filter: the ballistic escape proxy. A dressed
/// stationary state drives it to zero exactly once the counter clears the
/// resolved position range, while a state with an outgoing photon keeps it
/// bounded away from zero.
///
/// Requires the infrared-regular dispersion, so the generator agrees with
/// the physical one on every state without soft photons.
pub fn asymptotic_observable(
    op: &FiberOperator,
    ladder: &ScaleLadder,
    window: (f64, f64),
    edge: f64,
    phi: &[C64],
    times: &[f64],
    ctrl: &StepControl,
) -> Result<ObservableSeries> {
    ctrl.validate()?;
    ladder.validate()?;
    if op.dispersion != Dispersion::Modified {
        return Err(Error::refusal(
            "ballistic counting needs the infrared-regular dispersion branch",
        ));
    }
    check_times_increasing(times)?;
    if times[0] <= 0.0 {
        return Err(Error::config("times", "scaled counters need strictly positive times"));
    }
    if !(window.0.is_finite() && window.1.is_finite() && window.0 < window.1) {
        return Err(Error::config("window", "need lo < hi"));
    }
    if !edge.is_finite() || edge <= 0.0 {
        return Err(Error::config("window.edge", "must be positive"));
    }
    let n0 = linalg::norm(phi);
    if (n0 - 1.0).abs() > 1e-8 {
        return Err(Error::refusal(format!(
            "initial state must arrive normalized, got norm {n0:.12}"
        )));
    }
    let f = energy_window(window.0, window.1, edge);
    let (mut xi, filter_error) = apply_filter(op, f, phi, ctrl.filter_order)?;
    if filter_error > FILTER_TOL {
        return Err(Error::refusal(format!(
            "energy filter stalled at error {filter_error:.3e}, raise filter_order"
        )));
    }
    let pos = position_decomposition(&op.space.grid)?;
    let gamma = ladder.gamma;
    let mode_count = op.space.grid.mode_count();
    let mut dt_hint = ctrl.dt_max;
    let mut log = MarchLog::default();
    let mut prev_t = 0.0f64;
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        march(op, &mut xi, t - prev_t, &mut dt_hint, ctrl, &mut log)?;
        prev_t = t;
        let chi = pos.weighted_op(mode_count, |s| {
            quintic_step((s / t - gamma) / (0.2 * gamma))
        });
        let counter = lift_fock(&op.space, &second_quantize_offdiag(&op.space.fock, &chi)?);
        values.push(counter.expectation(&xi).max(0.0));
    }
    let (cauchy_tail, liminf_tail, settled) = tail_stats(times, &values);
    Ok(ObservableSeries {
        times: times.to_vec(),
        values,
        filter_error,
        cauchy_tail,
        liminf_tail,
        settled,
    })
}

/// Finite stack of fibers on a momentum ray with the block operators and
/// the quadrature weights of the direct-integral norm.
#[derive(Debug, Clone)]
pub struct DirectIntegralGrid {
    pub space: Arc<FiberSpace>,
    pub center: [f64; 3],
    pub axis: [f64; 3],
    pub step: f64,
    pub momenta: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub blocks: Vec<FiberOperator>,
}

/// Build the ray `center + j step axis` for `j` in `-half..=half`, with
/// every sample kept inside the momentum ball of the given radius.
pub fn direct_integral_grid(
    space: &Arc<FiberSpace>,
    center: [f64; 3],
    axis: [f64; 3],
    half_count: usize,
    step: f64,
    momentum_cap: f64,
    coupling: f64,
    dispersion: Dispersion,
) -> Result<DirectIntegralGrid> {
    let axis_norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !axis_norm.is_finite() || axis_norm == 0.0 {
        return Err(Error::config("momentum.axis", "must be a nonzero vector"));
    }
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::config("momentum.step", "must be positive"));
    }
    if !momentum_cap.is_finite() || momentum_cap <= 0.0 {
        return Err(Error::config("momentum.cap", "must be positive"));
    }
    let count = 2 * half_count + 1;
    if count < 5 {
        return Err(Error::config(
            "momentum.samples",
            "need at least five samples on the ray for the stencil error probe",
        ));
    }
    let unit = [axis[0] / axis_norm, axis[1] / axis_norm, axis[2] / axis_norm];
    let mut momenta = Vec::with_capacity(count);
    for j in 0..count {
        let off = (j as f64 - half_count as f64) * step;
        let p = [
            center[0] + off * unit[0],
            center[1] + off * unit[1],
            center[2] + off * unit[2],
        ];
        let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if len > momentum_cap {
            return Err(Error::config(
                "momentum.samples",
                format!("sample at |p| = {len:.4} leaves the ball of radius {momentum_cap}"),
            ));
        }
        momenta.push(p);
    }
    let blocks = momenta
        .iter()
        .map(|&p| space.assemble(p, coupling, dispersion))
        .collect::<Result<Vec<_>>>()?;
    Ok(DirectIntegralGrid {
        space: Arc::clone(space),
        center,
        axis: unit,
        step,
        weights: vec![step; count],
        momenta,
        blocks,
    })
}

impl DirectIntegralGrid {
    pub fn sample_count(&self) -> usize {
        self.momenta.len()
    }

    pub fn fiber_dim(&self) -> usize {
        self.space.dim()
    }

    /// Antisymmetrized first-difference stencil along the ray, real and
    /// skew-symmetric; `i` times it is the Hermitian momentum derivative.
    /// `refined` switches the interior rows to the five-point rule, which
    /// feeds the stencil error probe.
    fn derivative_stencil(&self, refined: bool) -> Vec<f64> {
        let q = self.sample_count();
        let h = self.step;
        let mut d = vec![0.0f64; q * q];
        {
            let mut add = |r: usize, c: usize, v: f64| d[r + c * q] += v;
            for r in 0..q {
                if r == 0 {
                    add(0, 1, 1.0 / h);
                    add(0, 0, -1.0 / h);
                } else if r == q - 1 {
                    add(r, r, 1.0 / h);
                    add(r, r - 1, -1.0 / h);
                } else if refined && r >= 2 && r + 2 < q {
                    add(r, r + 2, -1.0 / (12.0 * h));
                    add(r, r + 1, 8.0 / (12.0 * h));
                    add(r, r - 1, -8.0 / (12.0 * h));
                    add(r, r - 2, 1.0 / (12.0 * h));
                } else {
                    add(r, r + 1, 0.5 / h);
                    add(r, r - 1, -0.5 / h);
                }
            }
        }
        let mut m = vec![0.0f64; q * q];
        for r in 0..q {
            for c in 0..q {
                m[r + c * q] = 0.5 * (d[r + c * q] - d[c + r * q]);
            }
        }
        m
    }

    /// Dense matrix of `cut(|X| / t)` on the ray, where `|X|` is the square
    /// root of the positive symmetric square of the stencil. The result is
    /// real symmetric, which makes the counter invariant under complex
    /// conjugation of the data.
    fn position_weights(
        &self,
        cut: &dyn Fn(f64) -> f64,
        t_abs: f64,
        refined: bool,
    ) -> Result<Vec<f64>> {
        let q = self.sample_count();
        let m = self.derivative_stencil(refined);
        let mut g = vec![0.0f64; q * q];
        for i in 0..q {
            for j in 0..q {
                let mut acc = 0.0;
                for l in 0..q {
                    acc += m[l + i * q] * m[l + j * q];
                }
                g[i + j * q] = acc;
            }
        }
        let vals = syev_full(&mut g, q)?;
        let mut w = vec![0.0f64; q * q];
        for (e, lam) in vals.iter().enumerate() {
            let fe = cut(lam.max(0.0).sqrt() / t_abs);
            if fe.abs() < 1e-15 {
                continue;
            }
            let col = &g[e * q..(e + 1) * q];
            for i in 0..q {
                let x = fe * col[i];
                for j in 0..q {
                    w[i + j * q] += x * col[j];
                }
            }
        }
        Ok(w)
    }
}

/// Gaussian wave packet of per-fiber ground states on the ray, with the
/// block phases aligned along the ray so the packet is localized in the
/// conjugate variable.
#[derive(Debug, Clone)]
pub struct DressedPacket {
    pub blocks: Vec<Vec<C64>>,
    pub energies: Vec<f64>,
    /// Largest centered-difference group speed along the ray.
    pub max_group_speed: f64,
}

pub fn dressed_packet(grid: &DirectIntegralGrid, width: f64, seed: u64) -> Result<DressedPacket> {
    if !width.is_finite() || width <= 0.0 {
        return Err(Error::config("packet.width", "must be positive"));
    }
    let q_count = grid.sample_count();
    let half = (q_count - 1) / 2;
    let mut blocks = Vec::with_capacity(q_count);
    let mut energies = Vec::with_capacity(q_count);
    let mut prev: Option<Vec<C64>> = None;
    for b in &grid.blocks {
        let gs = crate::spectral::ground_state(b, seed)?;
        let mut v = gs.vector;
        if let Some(p) = &prev {
            let z = linalg::dot(p, &v);
            if z.norm() > 1e-10 {
                linalg::scale(z.conj() / z.norm(), &mut v);
            }
        }
        prev = Some(v.clone());
        energies.push(gs.energy);
        blocks.push(v);
    }
    let mut norm2 = 0.0f64;
    let mut envelope = Vec::with_capacity(q_count);
    for j in 0..q_count {
        let off = (j as f64 - half as f64) * grid.step;
        let c = (-(off / width) * (off / width)).exp();
        norm2 += grid.weights[j] * c * c;
        envelope.push(c);
    }
    let scale = 1.0 / norm2.sqrt();
    for (b, c) in blocks.iter_mut().zip(&envelope) {
        linalg::scale(C64::new(c * scale, 0.0), b);
    }
    let mut max_group_speed = 0.0f64;
    for j in 1..q_count - 1 {
        let v = (energies[j + 1] - energies[j - 1]).abs() / (2.0 * grid.step);
        max_group_speed = max_group_speed.max(v);
    }
    Ok(DressedPacket { blocks, energies, max_group_speed })
}

/// Escape series along the momentum ray with its stencil error column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub stencil_errors: Vec<f64>,
    pub max_value: f64,
    pub max_stencil_error: f64,
    pub filter_error: f64,
}

/// Norm of the fast-moving part of the center of mass: the data is filtered
/// into an energy window block by block, propagated, and weighed with a
/// velocity cutoff supported above the slowest ladder scale applied to the
/// momentum derivative scaled by time.
///
/// Negative times run the reversed evolution; the counters always scale
/// with `|t|`. The series is refused when the five-point stencil disagrees
/// with the three-point one by more than a tenth of the measured signal.
pub fn com_propagation_check(
    grid: &DirectIntegralGrid,
    ladder: &ScaleLadder,
    window: (f64, f64),
    edge: f64,
    psi0: &[Vec<C64>],
    times: &[f64],
    ctrl: &StepControl,
) -> Result<ComSeries> {
    ctrl.validate()?;
    ladder.validate()?;
    let q_count = grid.sample_count();
    if psi0.len() != q_count {
        return Err(Error::config("state", "need one block per momentum sample"));
    }
    if psi0.iter().any(|b| b.len() != grid.fiber_dim()) {
        return Err(Error::config("state", "block dimension does not match the fiber"));
    }
    if times.is_empty() {
        return Err(Error::config("times", "need at least one sample"));
    }
    if times.iter().any(|t| !t.is_finite() || *t == 0.0) {
        return Err(Error::config("times", "samples must be finite and nonzero"));
    }
    let sign = times[0].signum();
    if times.iter().any(|t| t.signum() != sign) {
        return Err(Error::config("times", "samples must share one time direction"));
    }
    if times.windows(2).any(|w| w[1].abs() <= w[0].abs()) {
        return Err(Error::config("times", "samples must move strictly away from zero"));
    }
    let norm2: f64 = grid
        .weights
        .iter()
        .zip(psi0)
        .map(|(w, b)| w * b.iter().map(|z| z.norm_sqr()).sum::<f64>())
        .sum();
    if (norm2.sqrt() - 1.0).abs() > 1e-8 {
        return Err(Error::refusal(format!(
            "initial data must arrive normalized in the direct-integral norm, got {:.12}",
            norm2.sqrt()
        )));
    }
    let f = energy_window(window.0, window.1, edge);
    let mut states = Vec::with_capacity(q_count);
    let mut filter_error = 0.0f64;
    for (block, op) in psi0.iter().zip(&grid.blocks) {
        let (xi, err) = apply_filter(op, &f, block, ctrl.filter_order)?;
        filter_error = filter_error.max(err);
        states.push(xi);
    }
    if filter_error > FILTER_TOL {
        return Err(Error::refusal(format!(
            "energy filter stalled at error {filter_error:.3e}, raise filter_order"
        )));
    }
    let cut = {
        let (b, b1) = (ladder.beta, ladder.beta1);
        move |s: f64| quintic_step((s - b) / (b1 - b))
    };
    let mut dt_hints = vec![ctrl.dt_max; q_count];
    let mut log = MarchLog::default();
    let mut prev_t = 0.0f64;
    let mut values = Vec::with_capacity(times.len());
    let mut stencil_errors = Vec::with_capacity(times.len());
    let fdim = grid.fiber_dim();
    for &t in times {
        for ((state, op), hint) in states.iter_mut().zip(&grid.blocks).zip(&mut dt_hints) {
            march(op, state, t - prev_t, hint, ctrl, &mut log)?;
        }
        prev_t = t;
        let w2 = grid.position_weights(&cut, t.abs(), false)?;
        let w4 = grid.position_weights(&cut, t.abs(), true)?;
        let mut acc2 = 0.0f64;
        let mut acc4 = 0.0f64;
        let mut u = vec![ZERO; q_count];
        for i in 0..fdim {
            for (q, s) in states.iter().enumerate() {
                u[q] = s[i];
            }
            for r in 0..q_count {
                let mut y2 = ZERO;
                let mut y4 = ZERO;
                for (c, uq) in u.iter().enumerate() {
                    y2 += *uq * w2[r + c * q_count];
                    y4 += *uq * w4[r + c * q_count];
                }
                acc2 += grid.weights[r] * y2.norm_sqr();
                acc4 += grid.weights[r] * y4.norm_sqr();
            }
        }
        let (v2, v4) = (acc2.sqrt(), acc4.sqrt());
        values.push(v2);
        stencil_errors.push((v2 - v4).abs());
    }
    let max_value = values.iter().cloned().fold(0.0f64, f64::max);
    let max_stencil_error = stencil_errors.iter().cloned().fold(0.0f64, f64::max);
    if max_value > 1e-10 && max_stencil_error > 0.1 * max_value {
        return Err(Error::refusal(format!(
            "momentum-ray stencil error {max_stencil_error:.3e} exceeds a tenth of the \
             measured signal {max_value:.3e}, refine the ray"
        )));
    }
    Ok(ComSeries {
        times: times.to_vec(),
        values,
        stencil_errors,
        max_value,
        max_stencil_error,
        filter_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::{AtomSpec, FormFactorSpec, Masses, Potential, RadialGridSpec};
    use crate::fock::FockBasis;
    use crate::grid::DirectionSet;
    use crate::linalg::lapack::heev_full;
    use crate::spectral;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn atom_spec(l_max: u32, n_levels: usize) -> AtomSpec {
        AtomSpec {
            potential: Potential::Coulomb { charge: 1.0 },
            masses: Masses { electron: 2.0, nucleus: 2.0 },
            l_max,
            n_levels,
            grid: RadialGridSpec::default(),
        }
    }

    fn space(
        l_max: u32,
        n_levels: usize,
        shells: usize,
        dirs: DirectionSet,
        n_max: usize,
        sigma: f64,
    ) -> Arc<FiberSpace> {
        let ff = FormFactorSpec { sigma, ..FormFactorSpec::default() };
        let atom = Arc::new(atom_spec(l_max, n_levels).solve().unwrap());
        let grid = Arc::new(ModeGrid::build(shells, ff.k_uv, dirs, ff.sigma).unwrap());
        let fock = Arc::new(FockBasis::build(grid.mode_count(), n_max).unwrap());
        Arc::new(FiberSpace::new(atom, fock, grid, ff).unwrap())
    }

    fn random_state(dim: usize, seed: u64) -> Vec<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<C64> = (0..dim)
            .map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        linalg::normalize(&mut v);
        v
    }

    /// Smooth bump supported on [0.5, 1.7], inside the hard frequency
    /// window of the default form factors.
    fn outgoing_profile(grid: &ModeGrid) -> Vec<C64> {
        grid.dispersion_free
            .iter()
            .map(|&s| {
                let v = quintic_step((s - 0.5) / 0.2) * (1.0 - quintic_step((s - 1.5) / 0.2));
                C64::new(v, 0.0)
            })
            .collect()
    }

    #[test]
    fn inputs_are_validated() {
        let bad = StepControl { max_order: 4, ..StepControl::default() };
        assert!(bad.validate().is_err());
        let sp = space(0, 2, 3, DirectionSet::Octahedron6, 1, 0.35);
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        let ctrl = StepControl::default();
        let mut psi = random_state(op.dim(), 1);
        psi[0] *= 2.0;
        assert!(matches!(
            propagate(&op, &psi, &[0.0, 1.0], &ctrl),
            Err(Error::Refusal(_))
        ));
        let psi = random_state(op.dim(), 1);
        assert!(propagate(&op, &psi, &[0.0, 1.0, 0.5], &ctrl).is_err());
        let ladder = ScaleLadder { beta1: 0.2, ..ScaleLadder::default() };
        assert!(ladder.validate().is_err());
        assert!(matches!(
            asymptotic_observable(
                &op,
                &ScaleLadder::default(),
                (0.0, 1.0),
                0.1,
                &psi,
                &[1.0, 2.0],
                &ctrl
            ),
            Err(Error::Refusal(_))
        ));
        assert!(direct_integral_grid(
            &sp,
            [0.0; 3],
            [1.0, 0.0, 0.0],
            1,
            0.1,
            2.0,
            0.05,
            Dispersion::Free
        )
        .is_err());
        assert!(direct_integral_grid(
            &sp,
            [1.9, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            2,
            0.1,
            2.0,
            0.05,
            Dispersion::Free
        )
        .is_err());
    }

    #[test]
    fn propagator_matches_the_dense_exponential() {
        let sp = space(0, 2, 3, DirectionSet::Octahedron6, 1, 0.35);
        let op = sp.assemble([0.1, 0.0, 0.2], 0.05, Dispersion::Free).unwrap();
        let dim = op.dim();
        let psi = random_state(dim, 7);
        let ctrl = StepControl::default();
        let t_final = 3.7;
        let run = propagate(&op, &psi, &[0.0, 1.3, t_final], &ctrl).unwrap();

        let mut dense = op.to_dense();
        let vals = heev_full(&mut dense, dim).unwrap();
        let mut coeffs = vec![ZERO; dim];
        for e in 0..dim {
            let col = &dense[e * dim..(e + 1) * dim];
            coeffs[e] = linalg::dot(col, &psi);
        }
        let mut oracle = vec![ZERO; dim];
        for e in 0..dim {
            let col = &dense[e * dim..(e + 1) * dim];
            let phase = C64::new(0.0, -vals[e] * t_final).exp();
            linalg::axpy(phase * coeffs[e], col, &mut oracle);
        }
        let err: f64 = run.states[2]
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a - *b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "propagation error {err:.3e}");
        assert!(run.step_count > 0 && run.norm_drift < 1e-10);
    }

    #[test]
    fn eigenvector_only_gains_a_phase() {
        let sp = space(0, 2, 3, DirectionSet::Octahedron6, 1, 0.35);
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        let gs = spectral::ground_state(&op, 5).unwrap();
        let ctrl = StepControl::default();
        let times = [0.0, 2.5, 5.0];
        let run = propagate(&op, &gs.vector, &times, &ctrl).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let overlap = linalg::dot(&gs.vector, &run.states[i]);
            assert!((overlap.norm() - 1.0).abs() < 1e-9, "fidelity lost at t {t}");
            let expected = C64::new(0.0, -gs.energy * t).exp();
            let dist: f64 = run.states[i]
                .iter()
                .zip(&gs.vector)
                .map(|(a, b)| (*a - expected * *b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(dist < 1e-7, "phase error {dist:.3e} at t {t}");
        }
    }

    #[test]
    fn decoupled_sector_phases_are_exact() {
        let sp = space(0, 2, 3, DirectionSet::Octahedron6, 1, 0.35);
        let op = sp.assemble([0.0; 3], 0.0, Dispersion::Free).unwrap();
        let n_at = sp.n_orbitals();
        let one_photon = sp.fock.sector_range(1);
        let (ia, ib) = (n_at - 1, one_photon.start * n_at);
        let mut psi = vec![ZERO; op.dim()];
        let amp = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        psi[ia] = amp;
        psi[ib] = amp;
        let t = 4.0;
        let run = propagate(&op, &psi, &[0.0, t], &StepControl::default()).unwrap();
        let d = op.diag();
        let mut oracle = vec![ZERO; op.dim()];
        oracle[ia] = amp * C64::new(0.0, -d[ia] * t).exp();
        oracle[ib] = amp * C64::new(0.0, -d[ib] * t).exp();
        let err: f64 = run.states[1]
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a - *b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9, "sector phase error {err:.3e}");
    }

    #[test]
    fn soft_structure_is_exactly_preserved() {
        let sp = space(0, 2, 4, DirectionSet::Octahedron6, 1, 0.5);
        assert!(sp.grid.soft.iter().any(|&s| s), "fixture needs soft modes");
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        assert_eq!(soft_commutant_defect(&op), 0.0);

        let proj = sp.soft_projector_diag();
        let psi = random_state(op.dim(), 3);
        let mut hp = vec![ZERO; op.dim()];
        let mut p_psi = psi.clone();
        for (z, p) in p_psi.iter_mut().zip(&proj) {
            *z *= *p;
        }
        op.apply(&p_psi, &mut hp);
        let mut ph = vec![ZERO; op.dim()];
        op.apply(&psi, &mut ph);
        for (z, p) in ph.iter_mut().zip(&proj) {
            *z *= *p;
        }
        let defect = hp
            .iter()
            .zip(&ph)
            .map(|(a, b)| (*a - *b).norm())
            .fold(0.0f64, f64::max);
        assert_eq!(defect, 0.0);

        let soft = sp.soft_number_diag();
        let mut psi0 = random_state(op.dim(), 9);
        for (z, s) in psi0.iter_mut().zip(&soft) {
            if *s > 0.0 {
                *z = ZERO;
            }
        }
        linalg::normalize(&mut psi0);
        let ctrl = StepControl::default();
        let times = [0.0, 2.5, 5.0];
        let run_free = propagate(&op, &psi0, &times, &ctrl).unwrap();
        let op_mod = sp.assemble([0.0; 3], 0.05, Dispersion::Modified).unwrap();
        let run_mod = propagate(&op_mod, &psi0, &times, &ctrl).unwrap();
        assert_eq!(run_free.soft_drift, 0.0);
        assert_eq!(run_mod.soft_drift, 0.0);
        let dist: f64 = run_free.states[2]
            .iter()
            .zip(&run_mod.states[2])
            .map(|(a, b)| (*a - *b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-8, "generators disagree on a soft-free state: {dist:.3e}");
    }

    #[test]
    fn profile_ladders_are_mutually_adjoint() {
        let sp = space(0, 2, 3, DirectionSet::Octahedron6, 2, 0.35);
        let dim = sp.dim();
        let h: Vec<C64> = (0..sp.grid.mode_count())
            .map(|m| C64::new(0.3 + 0.1 * m as f64, 0.2 - 0.05 * m as f64))
            .collect();
        let x = random_state(dim, 11);
        let y = random_state(dim, 12);
        let lhs = linalg::dot(&y, &annihilate_profile(&sp, &h, &x));
        let rhs = linalg::dot(&create_profile(&sp, &h, &y), &x);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn emission_series_vanishes_for_soft_profiles_and_zero_coupling() {
        let sp = space(0, 2, 4, DirectionSet::Octahedron6, 1, 0.5);
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        let soft_profile: Vec<C64> = sp
            .grid
            .soft
            .iter()
            .map(|&s| if s { C64::new(1.0, 0.0) } else { ZERO })
            .collect();
        assert!(soft_profile.iter().any(|z| *z != ZERO));
        let n_at = sp.n_orbitals();
        let mut phi = vec![ZERO; op.dim()];
        phi[n_at - 1] = C64::new(1.0, 0.0);
        let ctrl = StepControl::default();
        let times = [1.0, 2.0, 3.0];
        let series = cook_integrand(&op, &soft_profile, &phi, &times, &ctrl).unwrap();
        assert!(series.values.iter().all(|&v| v == 0.0));

        let free = sp.assemble([0.0; 3], 0.0, Dispersion::Free).unwrap();
        let out = outgoing_profile(&sp.grid);
        let series = cook_integrand(&free, &out, &phi, &times, &ctrl).unwrap();
        assert!(series.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn emission_tail_exponent_certifies_integrability() {
        let sp = space(0, 2, 48, DirectionSet::Octahedron6, 1, 0.05);
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        let n_at = sp.n_orbitals();
        let mut phi = vec![ZERO; op.dim()];
        phi[n_at - 1] = C64::new(1.0, 0.0);
        let h = outgoing_profile(&sp.grid);
        let times: Vec<f64> = (1..=20).map(|i| 2.0 * i as f64).collect();
        let ctrl = StepControl::default();
        let series = cook_integrand(&op, &h, &phi, &times, &ctrl).unwrap();
        assert!(series.tail_resolved, "tail fit failed: {} points", series.fit_points);
        let mu = series.mu.unwrap();
        assert!(mu > 1.0, "tail exponent {mu:.3} not integrable");
        assert!(series.values[0] > 0.0);
    }

    #[test]
    fn wave_operator_difference_obeys_the_rate_integral() {
        let sp = space(0, 2, 24, DirectionSet::Octahedron6, 1, 0.05);
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        let n_at = sp.n_orbitals();
        let mut phi = vec![ZERO; op.dim()];
        phi[n_at - 1] = C64::new(1.0, 0.0);
        let h = outgoing_profile(&sp.grid);
        let ctrl = StepControl::default();
        let (t1, t2) = (6.0f64, 12.0f64);
        let times: Vec<f64> = (0..=48).map(|i| 0.25 * i as f64).collect();
        let series = cook_integrand(&op, &h, &phi, &times, &ctrl).unwrap();

        let omega = &sp.grid.dispersion_free;
        let asym = |t: f64| -> Vec<C64> {
            let mut state = phi.clone();
            let mut hint = ctrl.dt_max;
            let mut log = MarchLog::default();
            march(&op, &mut state, t, &mut hint, &ctrl, &mut log).unwrap();
            let h_t: Vec<C64> = h
                .iter()
                .zip(omega)
                .map(|(hm, &w)| *hm * C64::new(0.0, -w * t).exp())
                .collect();
            let mut back = annihilate_profile(&sp, &h_t, &state);
            march(&op, &mut back, -t, &mut hint, &ctrl, &mut log).unwrap();
            back
        };
        let (a1, a2) = (asym(t1), asym(t2));
        let lhs: f64 = a1
            .iter()
            .zip(&a2)
            .map(|(x, y)| (*x - *y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let rhs = series.integral_between(t1, t2);
        assert!(
            lhs <= rhs * 1.05 + 1e-6,
            "difference {lhs:.6e} above the rate integral {rhs:.6e}"
        );
        assert!(rhs > 0.0);
    }

    #[test]
    fn position_tail_decays_superquadratically() {
        let sp = space(0, 2, 24, DirectionSet::Octahedron6, 1, 0.05);
        let table =
            interaction_tail(&sp, 0.5, &[(1.0, 3.0), (1.0, 5.0), (1.0, 9.0)]).unwrap();
        for w in table.rows.windows(2) {
            assert!(
                w[1].bound < w[0].bound,
                "tail bound failed to decrease: {} vs {}",
                w[0].bound,
                w[1].bound
            );
        }
        let mu = table.mu_fit.expect("fit should resolve");
        assert!(mu >= 2.0, "tail exponent {mu:.2} below the smooth-profile floor");
        let halved = table.rows[2].bound / table.rows[1].bound;
        assert!(halved < 0.25, "doubling the separation only gave factor {halved:.3}");

        assert!(matches!(
            interaction_tail(&sp, 0.5, &[(1.0, 15.0)]),
            Err(Error::Refusal(_))
        ));
        let tiny = space(0, 2, 4, DirectionSet::Octahedron6, 1, 0.5);
        assert!(matches!(
            interaction_tail(&tiny, 0.5, &[(1.0, 2.0)]),
            Err(Error::Refusal(_))
        ));
        assert!(interaction_tail(&sp, -1.0, &[(1.0, 3.0)]).is_err());
    }

    #[test]
    fn filter_matches_dense_functional_calculus() {
        let sp = space(0, 2, 3, DirectionSet::Octahedron6, 1, 0.35);
        let op = sp.assemble([0.0; 3], 0.05, Dispersion::Free).unwrap();
        let dim = op.dim();
        let psi = random_state(dim, 21);
        let f = energy_window(-1.0, 1.5, 0.3);
        let (filtered, err) = apply_filter(&op, &f, &psi, dim).unwrap();
        assert!(err < 1e-10);

        let mut dense = op.to_dense();
        let vals = heev_full(&mut dense, dim).unwrap();
        let mut oracle = vec![ZERO; dim];
        for e in 0..dim {
            let col = &dense[e * dim..(e + 1) * dim];
            let c = linalg::dot(col, &psi) * f(vals[e]);
            linalg::axpy(c, col, &mut oracle);
        }
        let dist: f64 = filtered
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (*a - *b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-8, "filter error {dist:.3e}");
    }

    #[test]
    fn ballistic_fraction_separates_bound_and_escaping_states() {
        let sp = space(0, 2, 48, DirectionSet::Octahedron6, 1, 0.05);
        let op = sp.assemble([0.0; 3], 0.02, Dispersion::Modified).unwrap();
        let gs = spectral::ground_state(&op, 13).unwrap();
        let ladder = ScaleLadder::default();
        let ctrl = StepControl::default();

        let window = (gs.energy - 0.2, gs.energy + 0.2);
        let times: Vec<f64> = (1..=6).map(|i| 6.0 * i as f64).collect();
        let bound =
            asymptotic_observable(&op, &ladder, window, 0.1, &gs.vector, &times, &ctrl)
                .unwrap();
        assert!(
            *bound.values.last().unwrap() < 1e-6,
            "bound state still counts {:.3e} escaping photons",
            bound.values.last().unwrap()
        );
        assert!(bound.liminf_tail < 1e-6 && bound.settled);

        let h = outgoing_profile(&sp.grid);
        let mut excited = create_profile(&sp, &h, &gs.vector);
        linalg::orthogonalize_against(std::slice::from_ref(&gs.vector), &mut excited);
        linalg::normalize(&mut excited);
        let window = (gs.energy + 0.4, gs.energy + 1.9);
        let short: Vec<f64> = (1..=3).map(|i| 6.0 * i as f64).collect();
        let esc_short =
            asymptotic_observable(&op, &ladder, window, 0.15, &excited, &short, &ctrl)
                .unwrap();
        let esc_long =
            asymptotic_observable(&op, &ladder, window, 0.15, &excited, &times, &ctrl)
                .unwrap();
        assert!(
            esc_short.liminf_tail > 0.2 && esc_long.liminf_tail > 0.2,
            "escaping photon lost: {:.3} then {:.3}",
            esc_short.liminf_tail,
            esc_long.liminf_tail
        );
        assert!(
            (esc_short.liminf_tail - esc_long.liminf_tail).abs() < 0.1,
            "doubling the budget moved the floor: {:.3} vs {:.3}",
            esc_short.liminf_tail,
            esc_long.liminf_tail
        );
        assert!(esc_long.settled);
    }

    #[test]
    fn momentum_ray_tracks_the_dressed_packet() {
        let sp = space(0, 2, 12, DirectionSet::Octahedron6, 1, 0.05);
        let grid = direct_integral_grid(
            &sp,
            [0.4, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            8,
            0.1,
            2.0,
            0.05,
            Dispersion::Modified,
        )
        .unwrap();
        let ladder = ScaleLadder {
            beta: 0.5,
            beta1: 0.6,
            beta2: 0.7,
            beta3: 0.8,
            gamma: 0.9,
        };
        let packet = dressed_packet(&grid, 0.3, 17).unwrap();
        assert!(
            packet.max_group_speed < ladder.beta,
            "packet moves at {:.3}, ladder starts at {:.3}",
            packet.max_group_speed,
            ladder.beta
        );
        let e_lo = packet.energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let e_hi = packet.energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let window = (e_lo - 0.1, e_hi + 0.1);
        let ctrl = StepControl::default();
        let times = [5.0, 10.0, 15.0, 20.0, 25.0];
        let series = com_propagation_check(
            &grid,
            &ladder,
            window,
            0.1,
            &packet.blocks,
            &times,
            &ctrl,
        )
        .unwrap();
        assert_eq!(*series.values.last().unwrap(), 0.0, "cutoff should clear the spectrum");
        assert!(series.values[3] == 0.0);
        assert!(
            series.values[0] >= series.values[2],
            "escape proxy failed to decay: {:?}",
            series.values
        );

        // Time reversal: conjugate data under the conjugated generators at
        // negated times reproduces the series exactly.
        let conj_blocks: Vec<FiberOperator> = grid
            .blocks
            .iter()
            .map(|b| {
                let mut op = b.op.clone();
                for v in &mut op.vals {
                    *v = v.conj();
                }
                FiberOperator {
                    space: Arc::clone(&b.space),
                    op,
                    momentum: b.momentum,
                    coupling: b.coupling,
                    dispersion: b.dispersion,
                    hash: b.hash.clone(),
                }
            })
            .collect();
        let rev_grid = DirectIntegralGrid {
            space: Arc::clone(&grid.space),
            center: grid.center,
            axis: grid.axis,
            step: grid.step,
            momenta: grid.momenta.clone(),
            weights: grid.weights.clone(),
            blocks: conj_blocks,
        };
        let rev_psi: Vec<Vec<C64>> = packet
            .blocks
            .iter()
            .map(|b| b.iter().map(|z| z.conj()).collect())
            .collect();
        let rev_times: Vec<f64> = times.iter().map(|t| -t).collect();
        let rev = com_propagation_check(
            &rev_grid,
            &ladder,
            window,
            0.1,
            &rev_psi,
            &rev_times,
            &ctrl,
        )
        .unwrap();
        for (a, b) in series.values.iter().zip(&rev.values) {
            assert!((a - b).abs() < 1e-10, "time reversal broke: {a:.6e} vs {b:.6e}");
        }
    }
}

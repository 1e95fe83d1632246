//! Photon-emission vertex between bound orbitals.
//!
//! A photon of momentum `k` couples to the atom through
//! `F(k) = e^{-i a_e k.x} kappa_e(|k|) + e^{+i a_n k.x} kappa_n(|k|)`,
//! where `a_e`, `a_n` are the mass shares of the two constituents and the
//! radial profiles `kappa` vanish identically below the infrared scale and
//! above the ultraviolet cutoff.
//!
//! Matrix elements expand the plane waves in multipoles: the angular part is
//! a finite, exact sum of tabulated harmonic triple products, leaving one
//! Bessel-weighted radial quadrature per multipole. For real orbitals this
//! makes the computed matrices exactly symmetric, with adjoints given by
//! momentum reversal.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::harmonics::{harmonic_index, harmonics_up_to, spherical_bessel, TABLE_MID_L};
use super::AtomBasis;
use crate::grid::{quintic_step, switch_on, ModeGrid};
use crate::hash::ContentHasher;
use crate::linalg::C64;
use crate::{Error, Result};

/// Radial ultraviolet profile: a Gaussian times a plateau that rolls off
/// smoothly to zero at the hard cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub amplitude: f64,
    pub width: f64,
    /// Fraction of the cutoff radius where the rolloff begins.
    pub plateau: f64,
}

impl Profile {
    /// Profile value before the infrared switch is applied.
    fn bare(&self, s: f64, k_uv: f64) -> f64 {
        if s >= k_uv {
            return 0.0;
        }
        let gauss = (-(s / self.width) * (s / self.width)).exp();
        let roll = 1.0 - quintic_step((s / k_uv - self.plateau) / (1.0 - self.plateau));
        self.amplitude * gauss * roll
    }

    fn validate(&self, path: &str) -> Result<()> {
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::config(format!("{path}.amplitude"), "must be nonnegative"));
        }
        if !self.width.is_finite() || self.width <= 0.0 {
            return Err(Error::config(format!("{path}.width"), "must be positive"));
        }
        if !self.plateau.is_finite() || !(0.0..1.0).contains(&self.plateau) {
            return Err(Error::config(format!("{path}.plateau"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for Profile {
    fn default() -> Self {
        Profile { amplitude: 1.0, width: 1.0, plateau: 0.7 }
    }
}

/// Ultraviolet profiles of the two constituents plus the frequency window
/// they share with the photon grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormFactorSpec {
    pub electron: Profile,
    pub nucleus: Profile,
    /// Infrared boundary: both profiles vanish identically at and below it.
    pub sigma: f64,
    /// Hard ultraviolet cutoff.
    pub k_uv: f64,
}

impl FormFactorSpec {
    pub fn kappa_electron(&self, s: f64) -> f64 {
        self.electron.bare(s, self.k_uv) * switch_on(s / self.sigma)
    }

    pub fn kappa_nucleus(&self, s: f64) -> f64 {
        self.nucleus.bare(s, self.k_uv) * switch_on(s / self.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        self.electron.validate("form_factor.electron")?;
        self.nucleus.validate("form_factor.nucleus")?;
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::config("form_factor.sigma", "must be positive"));
        }
        if !self.k_uv.is_finite() || self.k_uv <= 2.0 * self.sigma {
            return Err(Error::config(
                "form_factor.k_uv",
                "must exceed twice the infrared scale so the switch completes",
            ));
        }
        Ok(())
    }

    pub fn push_hash(&self, h: &mut ContentHasher) {
        for p in [&self.electron, &self.nucleus] {
            h.push_f64(p.amplitude);
            h.push_f64(p.width);
            h.push_f64(p.plateau);
        }
        h.push_f64(self.sigma);
        h.push_f64(self.k_uv);
    }
}

impl Default for FormFactorSpec {
    fn default() -> Self {
        FormFactorSpec {
            electron: Profile::default(),
            nucleus: Profile { amplitude: 0.0, width: 1.0, plateau: 0.7 },
            sigma: 0.35,
            k_uv: 3.0,
        }
    }
}

/// Matrix of the plane wave `e^{i q.x}` over the orbital family, computed by
/// the exact multipole expansion. Symmetric because orbitals are real;
/// exactly the overlap matrix at zero momentum.
pub fn plane_wave_matrix(atom: &AtomBasis, q_mag: f64, q_dir: [f64; 3]) -> Array2<C64> {
    let n = atom.n_orbitals();
    let mut out = Array2::zeros((n, n));
    if q_mag < 1e-300 {
        for a in 0..n {
            out[(a, a)] = C64::new(1.0, 0.0);
        }
        return out;
    }

    let ys = harmonics_up_to(TABLE_MID_L, q_dir);
    let jtab: Vec<Vec<f64>> =
        atom.r.iter().map(|&r| spherical_bessel(TABLE_MID_L, q_mag * r)).collect();
    let i_pow = |l: u32| C64::new(0.0, 1.0).powu(l);
    let four_pi = 4.0 * std::f64::consts::PI;

    let mut radial_cache: HashMap<(usize, usize, u32), f64> = HashMap::new();
    for a in 0..n {
        for b in a..n {
            let oa = atom.orbitals[a];
            let ob = atom.orbitals[b];
            let l_lo = oa.l.abs_diff(ob.l);
            let l_hi = oa.l + ob.l;
            let mut acc = C64::new(0.0, 0.0);
            // Parity restricts the expansion to every other degree.
            let mut l = l_lo;
            while l <= l_hi {
                let mut ang = 0.0;
                for m in -(l as i32)..=l as i32 {
                    let g = super::harmonics::triple_product(oa.l, oa.m, l, m, ob.l, ob.m);
                    if g != 0.0 {
                        ang += ys[harmonic_index(l, m)] * g;
                    }
                }
                if ang != 0.0 {
                    let key = (oa.radial.min(ob.radial), oa.radial.max(ob.radial), l);
                    let rad = *radial_cache.entry(key).or_insert_with(|| {
                        let ua = &atom.radials[oa.radial].samples;
                        let ub = &atom.radials[ob.radial].samples;
                        let mut s = 0.0;
                        for i in 0..atom.r.len() {
                            s += ua[i] * ub[i] * jtab[i][l as usize] * atom.w[i];
                        }
                        s
                    });
                    acc += i_pow(l) * (rad * ang);
                }
                l += 2;
            }
            let v = acc * four_pi;
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Vertex matrix over the whole orbital family at photon momentum `k`:
/// profile-weighted plane waves of the two constituents with their opposite
/// phase signs. Exactly zero at and below the infrared scale.
pub fn vertex_matrix(atom: &AtomBasis, ff: &FormFactorSpec, k: [f64; 3]) -> Array2<C64> {
    let n = atom.n_orbitals();
    let s = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    if s <= ff.sigma {
        return Array2::zeros((n, n));
    }
    let ke = ff.kappa_electron(s);
    let kn = ff.kappa_nucleus(s);
    if ke == 0.0 && kn == 0.0 {
        return Array2::zeros((n, n));
    }
    let dir = [k[0] / s, k[1] / s, k[2] / s];
    let mut out = Array2::zeros((n, n));
    if ke != 0.0 {
        let lam = atom.masses.electron_share();
        let m = plane_wave_matrix(atom, lam * s, [-dir[0], -dir[1], -dir[2]]);
        out += &(&m * C64::new(ke, 0.0));
    }
    if kn != 0.0 {
        let lam = atom.masses.nucleus_share();
        let m = plane_wave_matrix(atom, lam * s, dir);
        out += &(&m * C64::new(kn, 0.0));
    }
    out
}

/// Vertex block between two levels: rows over the orbitals of `level_i`,
/// columns over those of `level_j`.
pub fn form_factor_matrix(
    atom: &AtomBasis,
    ff: &FormFactorSpec,
    k: [f64; 3],
    level_i: usize,
    level_j: usize,
) -> Result<Array2<C64>> {
    ff.validate()?;
    if level_i >= atom.n_levels() || level_j >= atom.n_levels() {
        return Err(Error::config(
            "level",
            format!("levels ({level_i}, {level_j}) outside the {} kept", atom.n_levels()),
        ));
    }
    let full = vertex_matrix(atom, ff, k);
    let ri = atom.levels[level_i].orbitals.clone();
    let rj = atom.levels[level_j].orbitals.clone();
    let mut out = Array2::zeros((ri.len(), rj.len()));
    for (a, oa) in ri.enumerate() {
        for (b, ob) in rj.clone().enumerate() {
            out[(a, b)] = full[(oa, ob)];
        }
    }
    Ok(out)
}

/// Vertex matrices for every mode of a photon grid. Soft modes carry exact
/// zero blocks. The quadrature weights stay with the grid; consumers fold
/// them in when they assemble interactions.
#[derive(Debug, Clone)]
pub struct CouplingTensor {
    pub blocks: Vec<Array2<C64>>,
    pub n_orbitals: usize,
    pub hash: String,
}

impl CouplingTensor {
    pub fn mode_count(&self) -> usize {
        self.blocks.len()
    }
}

static TENSOR_CACHE: OnceLock<Mutex<HashMap<String, Arc<CouplingTensor>>>> = OnceLock::new();

/// Assemble (or fetch from the in-process cache) the per-mode vertex blocks
/// for an atom, a profile family, and a photon grid. The three inputs must
/// agree on the infrared and ultraviolet scales.
pub fn coupling_tensor(
    atom: &AtomBasis,
    ff: &FormFactorSpec,
    grid: &ModeGrid,
) -> Result<Arc<CouplingTensor>> {
    ff.validate()?;
    if ff.sigma != grid.sigma {
        return Err(Error::config(
            "form_factor.sigma",
            format!("profile infrared scale {} must match the grid's {}", ff.sigma, grid.sigma),
        ));
    }
    if ff.k_uv != grid.k_uv {
        return Err(Error::config(
            "form_factor.k_uv",
            format!("profile cutoff {} must match the grid's {}", ff.k_uv, grid.k_uv),
        ));
    }

    let mut hasher = ContentHasher::new("coupling-tensor");
    hasher.push_str(&atom.hash);
    ff.push_hash(&mut hasher);
    hasher.push_str(&grid.hash);
    let hash = hasher.finish_hex();

    let cache = TENSOR_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().expect("cache lock").get(&hash) {
        return Ok(Arc::clone(hit));
    }

    let n = atom.n_orbitals();
    let blocks: Vec<Array2<C64>> = grid
        .modes
        .par_iter()
        .zip(grid.soft.par_iter())
        .map(|(&k, &soft)| {
            if soft {
                Array2::zeros((n, n))
            } else {
                vertex_matrix(atom, ff, k)
            }
        })
        .collect();

    let tensor = Arc::new(CouplingTensor { blocks, n_orbitals: n, hash: hash.clone() });
    cache.lock().expect("cache lock").insert(hash, Arc::clone(&tensor));
    Ok(tensor)
}

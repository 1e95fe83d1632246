//! Photon-momentum discretization.
//!
//! Modes live on a product grid: radial shells on (0, k_uv] times a fixed
//! direction set on the unit sphere. Mode index = direction * shells + shell,
//! so the radial chain of one direction is contiguous. Quadrature weights
//! w = r^2 dr * w_dir approximate the momentum-space volume integral; the
//! direction weights sum to 4 pi.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::ContentHasher;

/// Quintic ramp: 0 below 0, 1 above 1, C^2 monotone in between.
pub fn quintic_step(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    }
}

/// Infrared switch: identically 0 for u <= 1, identically 1 for u >= 2.
pub fn switch_on(u: f64) -> f64 {
    quintic_step(u - 1.0)
}

/// Modified one-photon dispersion.
///
/// omega(r) = sqrt(r^2 + s(r)^2 sigma^2/4) with s = 1 on [0, sigma/2] and
/// s = 0 above sigma. This gives omega >= r everywhere, omega = r exactly
/// for r >= sigma and omega >= sigma/2 globally.
pub fn omega_mod(r: f64, sigma: f64) -> f64 {
    let s = 1.0 - quintic_step(2.0 * r / sigma - 1.0);
    if s == 0.0 {
        r
    } else {
        (r * r + s * s * sigma * sigma / 4.0).sqrt()
    }
}

/// Direction set on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DirectionSet {
    /// 6 axis directions, exact through degree 3.
    Octahedron6,
    /// 14 points (axes + cube diagonals), exact through degree 5.
    Lebedev14,
    /// 26 points (axes + edge midpoints + diagonals), exact through degree 7.
    Lebedev26,
    /// Gauss-Legendre in cos(theta) times uniform azimuthal grid.
    Gauss { polar: usize, azimuthal: usize },
}

impl DirectionSet {
    /// Unit vectors and weights; weights sum to 4 pi.
    pub fn points(&self) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
        let four_pi = 4.0 * std::f64::consts::PI;
        match *self {
            DirectionSet::Octahedron6 => {
                let dirs = axes();
                let w = vec![four_pi / 6.0; 6];
                Ok((dirs, w))
            }
            DirectionSet::Lebedev14 => {
                let mut dirs = axes();
                let mut w = vec![four_pi / 15.0; 6];
                dirs.extend(diagonals());
                w.extend(std::iter::repeat(four_pi * 3.0 / 40.0).take(8));
                Ok((dirs, w))
            }
            DirectionSet::Lebedev26 => {
                let mut dirs = axes();
                let mut w = vec![four_pi / 21.0; 6];
                dirs.extend(edge_midpoints());
                w.extend(std::iter::repeat(four_pi * 4.0 / 105.0).take(12));
                dirs.extend(diagonals());
                w.extend(std::iter::repeat(four_pi * 9.0 / 280.0).take(8));
                Ok((dirs, w))
            }
            DirectionSet::Gauss { polar, azimuthal } => {
                if polar == 0 || azimuthal == 0 {
                    return Err(Error::config(
                        "direction_set",
                        "gauss product set needs polar >= 1 and azimuthal >= 1",
                    ));
                }
                let (nodes, gl_w) = gauss_legendre(polar);
                let mut dirs = Vec::with_capacity(polar * azimuthal);
                let mut w = Vec::with_capacity(polar * azimuthal);
                let dphi = 2.0 * std::f64::consts::PI / azimuthal as f64;
                for (ct, wt) in nodes.iter().zip(&gl_w) {
                    let st = (1.0 - ct * ct).max(0.0).sqrt();
                    for a in 0..azimuthal {
                        let phi = (a as f64 + 0.5) * dphi;
                        dirs.push([st * phi.cos(), st * phi.sin(), *ct]);
                        w.push(wt * dphi);
                    }
                }
                Ok((dirs, w))
            }
        }
    }
}

fn axes() -> Vec<[f64; 3]> {
    vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ]
}

fn diagonals() -> Vec<[f64; 3]> {
    let c = 1.0 / 3f64.sqrt();
    let mut out = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push([sx * c, sy * c, sz * c]);
            }
        }
    }
    out
}

fn edge_midpoints() -> Vec<[f64; 3]> {
    let c = 1.0 / 2f64.sqrt();
    let mut out = Vec::with_capacity(12);
    for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
        for si in [-1.0, 1.0] {
            for sj in [-1.0, 1.0] {
                let mut v = [0.0; 3];
                v[i] = si * c;
                v[j] = sj * c;
                out.push(v);
            }
        }
    }
    out
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_deriv(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Discretized photon momenta with quadrature weights and both dispersions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeGrid {
    pub modes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub radial_index: Vec<u32>,
    pub angular_index: Vec<u32>,
    pub dispersion_free: Vec<f64>,
    pub dispersion_mod: Vec<f64>,
    pub soft: Vec<bool>,
    pub radial_points: Vec<f64>,
    pub radial_step: f64,
    pub directions: Vec<[f64; 3]>,
    pub direction_weights: Vec<f64>,
    pub sigma: f64,
    pub k_uv: f64,
    pub hash: String,
}

impl ModeGrid {
    /// Midpoint radial shells on (0, k_uv] crossed with `dirs`.
    pub fn build(radial_shells: usize, k_uv: f64, dirs: DirectionSet, sigma: f64) -> Result<Self> {
        if radial_shells == 0 {
            return Err(Error::config("grid.radial_shells", "need at least one shell"));
        }
        if !(k_uv > 0.0) || !k_uv.is_finite() {
            return Err(Error::config("grid.k_uv", "ultraviolet edge must be positive"));
        }
        if !(sigma > 0.0) || sigma >= k_uv {
            return Err(Error::config("grid.sigma", "need 0 < sigma < k_uv"));
        }
        let (directions, direction_weights) = dirs.points()?;
        let dr = k_uv / radial_shells as f64;
        let radial_points: Vec<f64> = (0..radial_shells)
            .map(|s| (s as f64 + 0.5) * dr)
            .collect();

        let m = radial_shells * directions.len();
        let mut modes = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        let mut radial_index = Vec::with_capacity(m);
        let mut angular_index = Vec::with_capacity(m);
        let mut dispersion_free = Vec::with_capacity(m);
        let mut dispersion_mod = Vec::with_capacity(m);
        let mut soft = Vec::with_capacity(m);
        for (d, dir) in directions.iter().enumerate() {
            for (s, &r) in radial_points.iter().enumerate() {
                modes.push([r * dir[0], r * dir[1], r * dir[2]]);
                weights.push(r * r * dr * direction_weights[d]);
                radial_index.push(s as u32);
                angular_index.push(d as u32);
                dispersion_free.push(r);
                dispersion_mod.push(omega_mod(r, sigma));
                soft.push(r < sigma);
            }
        }

        let mut grid = ModeGrid {
            modes,
            weights,
            radial_index,
            angular_index,
            dispersion_free,
            dispersion_mod,
            soft,
            radial_points,
            radial_step: dr,
            directions,
            direction_weights,
            sigma,
            k_uv,
            hash: String::new(),
        };
        grid.hash = grid.compute_hash();
        Ok(grid)
    }

    fn compute_hash(&self) -> String {
        let mut h = ContentHasher::new("mode-grid");
        h.push_f64(self.sigma);
        h.push_f64(self.k_uv);
        h.push_u64(self.radial_points.len() as u64);
        h.push_u64(self.directions.len() as u64);
        for m in &self.modes {
            h.push_f64_slice(m);
        }
        h.push_f64_slice(&self.weights);
        h.finish_hex()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn shells(&self) -> usize {
        self.radial_points.len()
    }

    pub fn direction_count(&self) -> usize {
        self.directions.len()
    }

    /// Contiguous mode range carrying direction `d`.
    pub fn direction_block(&self, d: usize) -> std::ops::Range<usize> {
        let r = self.shells();
        d * r..(d + 1) * r
    }

    pub fn soft_count(&self) -> usize {
        self.soft.iter().filter(|s| **s).count()
    }

    /// Same shells and weights with every momentum rotated by `rot`.
    pub fn rotated(&self, rot: &[[f64; 3]; 3]) -> Self {
        let apply = |v: &[f64; 3]| {
            [
                rot[0][0] * v[0] + rot[0][1] * v[1] + rot[0][2] * v[2],
                rot[1][0] * v[0] + rot[1][1] * v[1] + rot[1][2] * v[2],
                rot[2][0] * v[0] + rot[2][1] * v[1] + rot[2][2] * v[2],
            ]
        };
        let mut out = self.clone();
        out.modes = self.modes.iter().map(apply).collect();
        out.directions = self.directions.iter().map(apply).collect();
        out.hash = out.compute_hash();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn direction_weights_sum_to_sphere() {
        for set in [
            DirectionSet::Octahedron6,
            DirectionSet::Lebedev14,
            DirectionSet::Lebedev26,
            DirectionSet::Gauss { polar: 4, azimuthal: 6 },
        ] {
            let (dirs, w) = set.points().unwrap();
            let total: f64 = w.iter().sum();
            assert_relative_eq!(total, 4.0 * std::f64::consts::PI, max_relative = 1e-13);
            for d in dirs {
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                assert_relative_eq!(n, 1.0, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn quadratic_moments_integrate_exactly() {
        // Integral of z^2 over the sphere is 4 pi / 3; degree-2 exactness
        // holds for every shipped set.
        for set in [
            DirectionSet::Octahedron6,
            DirectionSet::Lebedev14,
            DirectionSet::Lebedev26,
            DirectionSet::Gauss { polar: 3, azimuthal: 4 },
        ] {
            let (dirs, w) = set.points().unwrap();
            let z2: f64 = dirs.iter().zip(&w).map(|(d, w)| d[2] * d[2] * w).sum();
            assert_relative_eq!(z2, 4.0 * std::f64::consts::PI / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn lebedev26_degree_six_moment() {
        // Integral of z^6 over the sphere is 4 pi / 7.
        let (dirs, w) = DirectionSet::Lebedev26.points().unwrap();
        let z6: f64 = dirs.iter().zip(&w).map(|(d, w)| d[2].powi(6) * w).sum();
        assert_relative_eq!(z6, 4.0 * std::f64::consts::PI / 7.0, max_relative = 1e-12);
    }

    #[test]
    fn gauss_legendre_classic_values() {
        let (x, w) = gauss_legendre(5);
        assert_relative_eq!(x[2], 0.0, epsilon = 1e-15);
        assert_relative_eq!(x[4], 0.906_179_845_938_664, max_relative = 1e-12);
        assert_relative_eq!(w[2], 0.568_888_888_888_889, max_relative = 1e-12);
        let poly: f64 = x.iter().zip(&w).map(|(x, w)| x.powi(8) * w).sum();
        assert_relative_eq!(poly, 2.0 / 9.0, max_relative = 1e-12);
    }

    #[test]
    fn weights_cover_ball_volume() {
        let grid = ModeGrid::build(40, 2.0, DirectionSet::Lebedev14, 0.1).unwrap();
        let vol: f64 = grid.weights.iter().sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 8.0;
        assert_relative_eq!(vol, exact, max_relative = 1e-3);
        assert!(grid.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn dispersion_satisfies_gap_hypotheses() {
        let sigma = 0.3;
        let grid = ModeGrid::build(120, 3.0, DirectionSet::Octahedron6, sigma).unwrap();
        for i in 0..grid.mode_count() {
            let r = grid.dispersion_free[i];
            let w = grid.dispersion_mod[i];
            assert!(w >= r - 1e-15);
            assert!(w >= sigma / 2.0 - 1e-15);
            if r >= sigma {
                assert_eq!(w, r);
            }
        }
    }

    #[test]
    fn dispersion_subadditive_on_samples() {
        use rand::{Rng, SeedableRng};
        let sigma = 0.4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let a: f64 = rng.gen_range(0.0..2.0);
            let b: f64 = rng.gen_range(0.0..2.0);
            // Radial subadditivity is the worst case for aligned momenta.
            assert!(omega_mod(a + b, sigma) <= omega_mod(a, sigma) + omega_mod(b, sigma) + 1e-12);
        }
    }

    #[test]
    fn soft_flags_and_blocks() {
        let grid = ModeGrid::build(10, 1.0, DirectionSet::Octahedron6, 0.35).unwrap();
        // Shells at 0.05..0.95; soft shells 0.05, 0.15, 0.25 per direction.
        assert_eq!(grid.soft_count(), 3 * 6);
        for d in 0..6 {
            let block = grid.direction_block(d);
            let radii: Vec<f64> = block.clone().map(|i| grid.dispersion_free[i]).collect();
            for pair in radii.windows(2) {
                assert!(pair[1] > pair[0]);
            }
            for i in block {
                assert_eq!(grid.angular_index[i] as usize, d);
            }
        }
    }

    #[test]
    fn rotation_keeps_weights_and_changes_hash() {
        let grid = ModeGrid::build(5, 1.0, DirectionSet::Octahedron6, 0.2).unwrap();
        let th = 0.3f64;
        let rot = [
            [th.cos(), -th.sin(), 0.0],
            [th.sin(), th.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let r = grid.rotated(&rot);
        assert_eq!(r.weights, grid.weights);
        assert_ne!(r.hash, grid.hash);
        for (a, b) in grid.modes.iter().zip(&r.modes) {
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert_relative_eq!(na, nb, max_relative = 1e-13);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(ModeGrid::build(0, 1.0, DirectionSet::Octahedron6, 0.1).is_err());
        assert!(ModeGrid::build(4, 1.0, DirectionSet::Octahedron6, 1.5).is_err());
        assert!(ModeGrid::build(4, -1.0, DirectionSet::Octahedron6, 0.1).is_err());
    }
}

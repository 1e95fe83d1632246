//! Scratch probe for position-tail decay. Not part of the test suite.

use std::sync::Arc;

use fiberlab::atom::{AtomSpec, FormFactorSpec, Masses, Potential, RadialGridSpec};
use fiberlab::dynamics::{interaction_tail, position_decomposition};
use fiberlab::fiber::FiberSpace;
use fiberlab::fock::FockBasis;
use fiberlab::grid::{DirectionSet, ModeGrid};
use fiberlab::linalg::{self, C64, ZERO};

fn main() {
    let ff = FormFactorSpec { sigma: 0.05, ..FormFactorSpec::default() };
    let atom = Arc::new(
        AtomSpec {
            potential: Potential::Coulomb { charge: 1.0 },
            masses: Masses { electron: 2.0, nucleus: 2.0 },
            l_max: 0,
            n_levels: 2,
            grid: RadialGridSpec::default(),
        }
        .solve()
        .unwrap(),
    );
    let grid = Arc::new(ModeGrid::build(24, ff.k_uv, DirectionSet::Octahedron6, ff.sigma).unwrap());
    let fock = Arc::new(FockBasis::build(grid.mode_count(), 1).unwrap());
    let sp = Arc::new(FiberSpace::new(atom, fock, Arc::clone(&grid), ff.clone()).unwrap());

    let pos = position_decomposition(&grid).unwrap();
    println!("y_max = {:.4}", pos.y_max);

    let n_modes = grid.mode_count();
    let a_e = sp.atom.masses.electron_share();
    let a_n = sp.atom.masses.nucleus_share();
    for &x_len in &[0.0, 0.5, 1.0] {
        let dir = [1.0, 0.0, 0.0];
        let x = [dir[0] * x_len, dir[1] * x_len, dir[2] * x_len];
        let mut fvec = vec![ZERO; n_modes];
        for q in 0..n_modes {
            let k = grid.modes[q];
            let s = grid.dispersion_free[q];
            let kx = k[0] * x[0] + k[1] * x[1] + k[2] * x[2];
            let e_part = C64::new(0.0, -a_e * kx).exp() * ff.kappa_electron(s);
            let n_part = C64::new(0.0, a_n * kx).exp() * ff.kappa_nucleus(s);
            fvec[q] = (e_part + n_part) * grid.weights[q].sqrt();
        }
        let total = linalg::norm(&fvec);
        print!("x = {x_len:.1}: total {total:.4e}; tails ");
        for &rc in &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 12.0] {
            let t = pos.tail_project(rc, &fvec);
            print!("{rc}:{:.3e} ", linalg::norm(&t));
        }
        println!();
    }

    let table = interaction_tail(&sp, 0.5, &[(1.0, 3.0), (1.0, 5.0), (1.0, 9.0)]).unwrap();
    for r in &table.rows {
        println!("pair ({}, {}) -> {:.6e}", r.r_inner, r.r_outer, r.bound);
    }
    println!("mu_fit = {:?}", table.mu_fit);
}

//! Gaussian integration oracles for the averaging flow: the iterated kernel against
//! the single multiscale kernel, and the free density against its closed form.
//!
//! Densities are computed as exact Gaussian marginals of quadratic forms assembled by
//! polarization of the energy evaluators, so none of the matrices used by
//! [`GreenSystem`] enter the oracle side.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::identities::{coupling_energy, gradient_energy};
use super::{plus_stiffness, truncate, GreenSystem};
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, MultiscaleLayout, RegionSequence};
use crate::linalg;
use crate::quadforms::{averaging_energy, ActionParams};

/// Matrix `A` of a homogeneous quadratic `q(v) = 1/2 v^T A v`.
pub fn polarize(n: usize, q: impl Fn(&DVector<f64>) -> f64) -> DMatrix<f64> {
    let mut single = vec![0.0; n];
    let mut e = DVector::zeros(n);
    for i in 0..n {
        e[i] = 1.0;
        single[i] = q(&e);
        e[i] = 0.0;
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 2.0 * single[i];
        for j in 0..i {
            e[i] = 1.0;
            e[j] = 1.0;
            let v = q(&e) - single[i] - single[j];
            e[i] = 0.0;
            e[j] = 0.0;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// `log int exp(-1/2 v^T A v) dv_drop` as a quadratic form on `keep` plus a constant.
#[derive(Clone, Debug)]
pub struct GaussianMarginal {
    pub precision: DMatrix<f64>,
    pub log_const: f64,
}

impl GaussianMarginal {
    pub fn new(a: &DMatrix<f64>, keep: &[usize], drop: &[usize]) -> Result<Self> {
        let precision = linalg::schur_marginal(a, keep, drop)?;
        let add = linalg::submatrix(a, drop, drop);
        let log_const = 0.5 * drop.len() as f64 * (2.0 * PI).ln() - 0.5 * linalg::logdet_spd(&add)?;
        Ok(GaussianMarginal { precision, log_const })
    }

    pub fn log_value(&self, v: &DVector<f64>) -> f64 {
        self.log_const - 0.5 * v.dot(&(&self.precision * v))
    }
}

fn free_energy(geom: &LatticeGeometry, mu_bar: f64, phi: &DVector<f64>) -> f64 {
    0.5 * gradient_energy(geom, phi) + 0.5 * mu_bar * geom.site_weight() * phi.norm_squared()
}

/// `log` of the normalization of `exp(-1/2 sum a_e w_e (Phi_e - c_e)^2)` over `Phi`.
fn kernel_log_norm(stiff: &[f64], w: &[f64]) -> f64 {
    stiff.iter().zip(w).map(|(&a, &w)| 0.5 * (2.0 * PI / (a * w)).ln()).sum()
}

/// Density of the free field against the multiscale kernel, integrated over `Omega_1`.
/// Variables of the returned marginal: exterior sites, then layout entries.
fn free_marginal(
    geom: &LatticeGeometry,
    layout: &MultiscaleLayout,
    stiff: &DVector<f64>,
    mu_bar: f64,
    o1: &[usize],
    ext: &[usize],
) -> Result<GaussianMarginal> {
    let n = geom.n_sites();
    let m = layout.len();
    let a = polarize(n + m, |v| {
        let phi = v.rows(0, n).into_owned();
        let big = v.rows(n, m).into_owned();
        averaging_energy(layout, stiff, &big, &phi, None) + free_energy(geom, mu_bar, &phi)
    });
    let keep: Vec<usize> = ext.iter().copied().chain(n..n + m).collect();
    GaussianMarginal::new(&a, &keep, o1)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct CollapseReport {
    pub samples: usize,
    /// `max |(l_seq - l_single) - c| / max(1, |l_single|)` with `c` the first offset.
    pub max_rel: f64,
    /// Constant `log rho_seq - log rho_single` at the first sample.
    pub offset: f64,
    pub max_log_density: f64,
}

/// Integrate the free density against the level-`k` kernel, then the level-`k+1`
/// coupling over `Omega_{k+1}`, and compare pointwise with one integral against the
/// collapsed kernel of depth `k+1`.
pub fn iterated_collapse(
    geom: &LatticeGeometry,
    seq_plus: &RegionSequence,
    params: &ActionParams,
    samples: usize,
    seed: u64,
) -> Result<CollapseReport> {
    let k = geom.k as usize;
    if k == 0 || seq_plus.depth() != k + 1 || params.stiffness.len() < k + 1 {
        return Err(Error::Precondition("need k >= 1, a sequence of depth k+1 and k+1 stiffness levels".into()));
    }
    let sets = seq_plus.site_sets(geom);
    let o1 = sets[0].indices();
    let ext = sets[0].complement().indices();
    let ne = ext.len();
    let seq = truncate(geom, seq_plus)?;
    let layout = MultiscaleLayout::new(geom, &seq, false);
    let plus_layout = MultiscaleLayout::new(geom, seq_plus, false);
    let stiff = params.layout_stiffness(&layout);
    let plus_stiff = plus_stiffness(geom, params, &plus_layout);
    let m = layout.len();
    let p = plus_layout.len();

    // step 1: rho_k(phi_ext, Phi_k)
    let step1 = free_marginal(geom, &layout, &stiff, params.mu_bar, &o1, &ext)?;
    let log_nk = kernel_log_norm(stiff.as_slice(), &layout.weights());

    // step 2: the coupling, integrated over Phi_k on Omega_{k+1}
    let plus_pos: HashMap<(usize, usize), usize> =
        plus_layout.entries.iter().enumerate().map(|(q, e)| ((e.level, e.block), q)).collect();
    let source: Vec<Option<usize>> = layout.entries.iter().map(|e| plus_pos.get(&(e.level, e.block)).copied()).collect();
    let zpos: Vec<usize> = (0..m).filter(|&i| source[i].is_none()).collect();
    let t = zpos.len();
    let split = |y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let big_plus = y.rows(ne, p).into_owned();
        let mut u = DVector::zeros(ne + m);
        u.rows_mut(0, ne).copy_from(&y.rows(0, ne));
        let mut zi = 0;
        for i in 0..m {
            u[ne + i] = match source[i] {
                Some(q) => big_plus[q],
                None => {
                    zi += 1;
                    y[ne + p + zi - 1]
                }
            };
        }
        (big_plus, u)
    };
    let a2 = polarize(ne + p + t, |y| {
        let (big_plus, u) = split(y);
        let big = u.rows(ne, m).into_owned();
        coupling_energy(geom, params, &plus_layout, &big_plus, &layout, &big) + 0.5 * u.dot(&(&step1.precision * &u))
    });
    let keep2: Vec<usize> = (0..ne + p).collect();
    let drop2: Vec<usize> = (ne + p..ne + p + t).collect();
    let step2 = GaussianMarginal::new(&a2, &keep2, &drop2)?;
    let top: Vec<usize> = plus_layout.positions_at_level(k + 1);
    let pw = plus_layout.weights();
    let l2 = (params.l * params.l) as f64;
    let log_ncoup = kernel_log_norm(&vec![params.a / l2; top.len()], &top.iter().map(|&q| pw[q]).collect::<Vec<_>>());
    let seq_const = step2.log_const + step1.log_const - log_nk - log_ncoup;

    // one integral against the collapsed kernel
    let single = free_marginal(geom, &plus_layout, &plus_stiff, params.mu_bar, &o1, &ext)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0.0;
    let mut max_rel = 0.0f64;
    let mut max_log = 0.0f64;
    for s in 0..samples {
        let v = random_vec(&mut rng, ne + p);
        let l_seq = seq_const - 0.5 * v.dot(&(&step2.precision * &v));
        let l_single = single.log_value(&v);
        let d = l_seq - l_single;
        if s == 0 {
            offset = d;
        }
        max_log = max_log.max(l_single.abs());
        max_rel = max_rel.max((d - offset).abs() / l_single.abs().max(1.0));
    }
    Ok(CollapseReport { samples, max_rel, offset, max_log_density: max_log })
}

#[derive(Clone, Debug, Serialize)]
pub struct FreeFlowReport {
    pub samples: usize,
    /// Largest `|log rho_oracle - log rho_closed|`.
    pub max_abs: f64,
    pub max_log_density: f64,
}

/// Gaussian integral of the free density against the kernel, against
/// `Z exp(-S)` evaluated at the minimizer `phi_{k,Omega}`.
pub fn free_flow_check(
    geom: &LatticeGeometry,
    seq: &RegionSequence,
    params: &ActionParams,
    samples: usize,
    seed: u64,
) -> Result<FreeFlowReport> {
    let n = geom.n_sites();
    let sets = seq.site_sets(geom);
    let o1 = sets[0].indices();
    let ext = sets[0].complement().indices();
    let ne = ext.len();
    let layout = MultiscaleLayout::new(geom, seq, false);
    let stiff = params.layout_stiffness(&layout);
    let m = layout.len();
    let log_n = kernel_log_norm(stiff.as_slice(), &layout.weights());
    let oracle = free_marginal(geom, &layout, &stiff, params.mu_bar, &o1, &ext)?;

    let sys = GreenSystem::new(geom, seq, params)?;
    let w = geom.site_weight();
    let log_z = 0.5 * o1.len() as f64 * (2.0 * PI).ln() - 0.5 * linalg::logdet_spd(&(&sys.h * w))? - log_n;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs = 0.0f64;
    let mut max_log = 0.0f64;
    for _ in 0..samples {
        let v = random_vec(&mut rng, ne + m);
        let big = v.rows(ne, m).into_owned();
        let mut phi = DVector::zeros(n);
        for (a, &x) in ext.iter().enumerate() {
            phi[x] = v[a];
        }
        let l_oracle = oracle.log_value(&v) - log_n;
        let phi_min = sys.solve(&big, &phi)?;
        let l_closed = log_z - averaging_energy(&layout, &stiff, &big, &phi_min, None) - free_energy(geom, params.mu_bar, &phi_min);
        max_abs = max_abs.max((l_oracle - l_closed).abs());
        max_log = max_log.max(l_closed.abs());
    }
    Ok(FreeFlowReport { samples, max_abs, max_log_density: max_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;

    #[test]
    fn polarize_recovers_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 4.0]);
        let got = polarize(3, |v| 0.5 * v.dot(&(&a * v)));
        assert!(linalg::max_abs(&(got - a)) < 1e-14);
    }

    #[test]
    fn marginal_of_diagonal_gaussian() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0]));
        let g = GaussianMarginal::new(&a, &[0], &[1]).unwrap();
        assert!((g.precision[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((g.log_const - 0.5 * (2.0 * PI / 5.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn collapse_on_a_line() {
        let g = LatticeGeometry::new(2, 1, 4, 3, 1, 1).unwrap();
        let o1 = Region::from_cubes(&g, 4, &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let o2 = Region::from_cubes(&g, 8, &[[0, 0, 0]]).unwrap();
        let seq = RegionSequence::new(&g, vec![o1, o2]).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.2, 3);
        let r = iterated_collapse(&g, &seq, &p, 20, 3).unwrap();
        assert!(r.max_rel < 1e-9, "{r:?}");
    }

    #[test]
    fn free_flow_on_a_line() {
        let g = LatticeGeometry::with_side(2, 1, 2, 0, 8).unwrap();
        let o1 = Region::from_cubes(&g, 2, &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let o2 = Region::from_cubes(&g, 4, &[[0, 0, 0]]).unwrap();
        let seq = RegionSequence::new(&g, vec![o1, o2]).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.2, 2);
        let r = free_flow_check(&g, &seq, &p, 20, 5).unwrap();
        assert!(r.max_abs < 1e-9, "{r:?}");
    }
}

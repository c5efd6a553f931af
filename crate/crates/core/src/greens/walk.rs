//! Parametrix from local inverses and its random-walk expansion, with optional
//! weakening parameters per cube.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::{local_green, GreenSystem};
use crate::error::{Error, Result};
use crate::geometry::{coords_in, LatticeGeometry, Region, RegionSequence, SiteSet};
use crate::linalg;
use crate::quadforms::ActionParams;

/// One cube of the cover: a cube of `delta Omega_j` of side `M L^j` fine sites.
#[derive(Clone, Debug)]
pub struct CoverCube {
    pub level: usize,
    /// Index in the level's cube grid.
    pub cube: usize,
    pub sites: SiteSet,
    /// The enlarged cube intersected with `Omega_1`.
    pub tilde: SiteSet,
    /// Positions of `tilde` in the `Omega_1` site list.
    local: Vec<usize>,
    /// `h_z` on `Omega_1`.
    pub h: DVector<f64>,
    /// Rows (in `Omega_1` positions) where `R_z` can be nonzero.
    rows: Vec<usize>,
    /// `R_z` restricted to `rows` by `local`.
    r: DMatrix<f64>,
    /// Cover cubes contained in `tilde`, as a bit mask.
    mask: u128,
}

#[derive(Clone, Debug, Serialize)]
pub struct WalkDiagnostics {
    /// Operator norm of the order-`n` term `G* R^n`.
    pub order_norms: Vec<f64>,
    /// Relative operator-norm error of the partial sum through each order.
    pub rel_errors: Vec<f64>,
    /// Largest ratio of successive term norms.
    pub ratio: f64,
    pub residual_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct WeakeningCheck {
    pub cube: usize,
    pub kappa1: f64,
    /// Max-entry norm of `dG/ds` from the contour rule.
    pub derivative_norm: f64,
    /// Contour rule against the exact affine coefficient.
    pub contour_error: f64,
    /// Central difference against the contour rule.
    pub finite_difference_error: f64,
    /// `sup |G(s)|` on the circle of radius `e^kappa1`.
    pub sup_on_circle: f64,
    pub cauchy_bound: f64,
    pub bound_holds: bool,
}

/// `G* = sum_z h_z G(tilde z) h_z` and `R = I - H G*`, with the walk sum `G = G* sum R^n`.
#[derive(Clone, Debug)]
pub struct RandomWalkExpansion {
    pub sys: GreenSystem,
    pub cover: Vec<CoverCube>,
    pub parametrix: DMatrix<f64>,
    pub residual: DMatrix<f64>,
}

fn bump(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        (0.5 * std::f64::consts::PI * u).cos().powi(2)
    }
}

/// Raised-cosine bump centred on a cube, vanishing on the outer layer of its enlargement.
fn cube_bump(geom: &LatticeGeometry, cube_side: usize, grid: usize, cube: usize) -> Vec<f64> {
    let cc = coords_in(cube, grid, geom.d);
    let side = geom.side() as f64;
    let half = 1.5 * cube_side as f64 - 1.0;
    (0..geom.n_sites())
        .map(|x| {
            let xc = geom.coords(x);
            (0..geom.d)
                .map(|mu| {
                    let centre = (cc[mu] * cube_side) as f64 + 0.5 * cube_side as f64;
                    let mut dx = (xc[mu] as f64 + 0.5 - centre).rem_euclid(side);
                    dx = dx.min(side - dx);
                    bump(dx / half)
                })
                .product()
        })
        .collect()
}

impl RandomWalkExpansion {
    pub fn new(geom: &LatticeGeometry, seq: &RegionSequence, params: &ActionParams) -> Result<Self> {
        let sys = GreenSystem::new(geom, seq, params)?;
        Self::from_system(geom, seq, sys)
    }

    pub fn from_system(geom: &LatticeGeometry, seq: &RegionSequence, sys: GreenSystem) -> Result<Self> {
        let n = sys.sites.len();
        let index = sys.local_index();
        let sets = seq.site_sets(geom);
        let mut raw = Vec::new();
        for (idx, reg) in seq.regions.iter().enumerate() {
            if reg.grid < 3 {
                return Err(Error::Geometry(format!("level {} has a cube grid of {} < 3", idx + 1, reg.grid)));
            }
            for c in reg.cube_indices() {
                let sites = SiteSet::from_indices(geom.n_sites(), reg.cube_sites(geom, c));
                if idx + 1 < sets.len() && sites.is_subset(&sets[idx + 1]) {
                    continue;
                }
                let single = Region::from_mask(reg.cube_side, reg.grid, reg.d, (0..reg.n_cubes()).map(|i| i == c).collect());
                let tilde = single.enlarge(1).site_set(geom).intersect(&sets[0]);
                let g = cube_bump(geom, reg.cube_side, reg.grid, c);
                raw.push((idx + 1, c, sites, tilde, g));
            }
        }
        if raw.len() > 128 {
            return Err(Error::Cap(format!("{} cover cubes exceed the 128 supported", raw.len())));
        }
        let mut norm = vec![0.0; n];
        for (_, _, _, _, g) in &raw {
            for (a, &x) in sys.sites.iter().enumerate() {
                norm[a] += g[x] * g[x];
            }
        }
        if norm.iter().any(|&v| v <= 0.0) {
            return Err(Error::Geometry("bumps do not cover Omega_1".into()));
        }
        let masks: Vec<u128> = raw
            .iter()
            .map(|(_, _, _, tilde, _)| {
                raw.iter().enumerate().filter(|(_, o)| o.2.is_subset(tilde)).fold(0u128, |m, (i, _)| m | (1u128 << i))
            })
            .collect();
        let cover: Vec<CoverCube> = raw
            .into_par_iter()
            .zip(masks)
            .map(|((level, cube, sites, tilde, g), mask)| -> Result<CoverCube> {
                let h = DVector::from_iterator(n, sys.sites.iter().enumerate().map(|(a, &x)| g[x] / norm[a].sqrt()));
                let local: Vec<usize> = tilde.indices().iter().map(|x| index[x]).collect();
                let gz = local_green(&sys, &tilde)?.mat;
                let h_loc = DVector::from_iterator(local.len(), local.iter().map(|&a| h[a]));
                let h_cols = sys.h.select_columns(local.iter());
                // K_z restricted to columns in tilde: H(x,y) (h(y) - h(x))
                let mut k = h_cols.clone();
                for x in 0..n {
                    for (b, _) in local.iter().enumerate() {
                        k[(x, b)] = h_cols[(x, b)] * (h_loc[b] - h[x]);
                    }
                }
                let full = -(k * gz * DMatrix::from_diagonal(&h_loc));
                let rows: Vec<usize> = (0..n).filter(|&x| full.row(x).iter().any(|v| *v != 0.0)).collect();
                let r = full.select_rows(rows.iter());
                Ok(CoverCube { level, cube, sites, tilde, local, h, rows, r, mask })
            })
            .collect::<Result<_>>()?;
        let mut parametrix = DMatrix::zeros(n, n);
        for c in &cover {
            let gz = local_green(&sys, &c.tilde)?.mat;
            for (i, &a) in c.local.iter().enumerate() {
                for (j, &b) in c.local.iter().enumerate() {
                    parametrix[(a, b)] += c.h[a] * gz[(i, j)] * c.h[b];
                }
            }
        }
        let residual = DMatrix::identity(n, n) - &sys.h * &parametrix;
        Ok(RandomWalkExpansion { sys, cover, parametrix, residual })
    }

    /// `max |sum_z h_z^2 - 1|`.
    pub fn partition_defect(&self) -> f64 {
        let n = self.sys.sites.len();
        (0..n)
            .map(|a| (self.cover.iter().map(|c| c.h[a] * c.h[a]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max |R - sum_z R_z|`.
    pub fn residual_split_defect(&self) -> f64 {
        let n = self.sys.sites.len();
        let mut sum = DMatrix::zeros(n, n);
        for c in &self.cover {
            for (i, &x) in c.rows.iter().enumerate() {
                for (j, &b) in c.local.iter().enumerate() {
                    sum[(x, b)] += c.r[(i, j)];
                }
            }
        }
        linalg::max_abs(&(sum - &self.residual))
    }

    pub fn residual_norm(&self) -> f64 {
        linalg::op_norm(&self.residual)
    }

    /// Partial sums `G* sum_{n <= order} R^n`, stopping early once a term is below
    /// `tol` relative to the sum.
    pub fn partial_sums(&self, max_order: usize, tol: f64) -> Result<(DMatrix<f64>, WalkDiagnostics)> {
        let dense = self.sys.green()?;
        let dn = linalg::op_norm(&dense);
        let mut term = self.parametrix.clone();
        let mut sum = term.clone();
        let mut order_norms = vec![linalg::op_norm(&term)];
        let mut rel_errors = vec![linalg::op_norm(&(&sum - &dense)) / dn];
        for _ in 1..=max_order {
            term = &term * &self.residual;
            sum += &term;
            let tn = linalg::op_norm(&term);
            order_norms.push(tn);
            rel_errors.push(linalg::op_norm(&(&sum - &dense)) / dn);
            if tn < tol * linalg::op_norm(&sum) {
                break;
            }
        }
        let ratio = order_norms.windows(2).skip(1).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        let converged = ratio < 1.0;
        Ok((sum, WalkDiagnostics { order_norms, rel_errors, ratio, residual_norm: self.residual_norm(), converged }))
    }

    /// `G(s)` with `s` the indicator of `keep`: every walk whose steps cover only kept
    /// cubes, summed in closed form as `G* (I - R_keep)^{-1}`.
    pub fn restricted(&self, keep: &[bool]) -> Result<DMatrix<f64>> {
        if keep.len() != self.cover.len() {
            return Err(Error::Shape(format!("{} flags for {} cubes", keep.len(), self.cover.len())));
        }
        let allowed = keep.iter().enumerate().filter(|(_, &k)| k).fold(0u128, |m, (i, _)| m | (1u128 << i));
        let n = self.sys.sites.len();
        let mut m = DMatrix::identity(n, n);
        for c in self.cover.iter().filter(|c| c.mask & !allowed == 0) {
            for (i, &x) in c.rows.iter().enumerate() {
                for (j, &b) in c.local.iter().enumerate() {
                    m[(x, b)] -= c.r[(i, j)];
                }
            }
        }
        let x = m
            .transpose()
            .lu()
            .solve(&self.parametrix.transpose())
            .ok_or_else(|| Error::Singular("I - R restricted to the kept cubes".into()))?;
        Ok(x.transpose())
    }

    /// Walk sums grouped by order and by the set of cubes the walk covers
    /// (`X_omega`, as a mask over the cover).
    pub fn weakened_terms(&self, order: usize) -> Vec<BTreeMap<u128, DMatrix<f64>>> {
        let n = self.sys.sites.len();
        let mut out = vec![BTreeMap::from([(0u128, self.parametrix.clone())])];
        for _ in 0..order {
            let mut next: BTreeMap<u128, DMatrix<f64>> = BTreeMap::new();
            for (x, t) in out.last().unwrap() {
                for c in &self.cover {
                    let p = t.select_columns(c.rows.iter()) * &c.r;
                    if linalg::max_abs(&p) == 0.0 {
                        continue;
                    }
                    let e = next.entry(x | c.mask).or_insert_with(|| DMatrix::zeros(n, n));
                    for (j, &b) in c.local.iter().enumerate() {
                        let mut col = e.column_mut(b);
                        col += p.column(j);
                    }
                }
            }
            out.push(next);
        }
        out
    }

    /// `sum_{|omega| <= order} s_omega G_omega` for real weakening parameters.
    pub fn weakened(&self, s: &[f64], order: usize) -> Result<DMatrix<f64>> {
        if s.len() != self.cover.len() {
            return Err(Error::Shape(format!("{} parameters for {} cubes", s.len(), self.cover.len())));
        }
        let n = self.sys.sites.len();
        let mut g = DMatrix::zeros(n, n);
        for terms in self.weakened_terms(order) {
            for (x, t) in terms {
                g += t * weight(x, s);
            }
        }
        Ok(g)
    }

    /// Split the truncated sum as `A + s_c B` in the parameter of cube `c`.
    fn affine_split(&self, c: usize, s: &[f64], order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.sys.sites.len();
        let (mut a, mut b) = (DMatrix::zeros(n, n), DMatrix::zeros(n, n));
        let bit = 1u128 << c;
        for terms in self.weakened_terms(order) {
            for (x, t) in terms {
                if x & bit != 0 {
                    b += t * weight(x & !bit, s);
                } else {
                    a += t * weight(x, s);
                }
            }
        }
        (a, b)
    }

    /// Derivative in `s_c` by a contour rule on `|s - s_c| = e^kappa1`, with the Cauchy bound check.
    pub fn weakening_check(&self, c: usize, s: &[f64], kappa1: f64, order: usize, m: usize) -> Result<WeakeningCheck> {
        let rho = kappa1.exp();
        if rho > (m as f64).sqrt() {
            return Err(Error::Precondition(format!("contour radius {rho:.3} exceeds M^(1/2)")));
        }
        if c >= self.cover.len() || s.len() != self.cover.len() {
            return Err(Error::Shape("cube index or parameter count".into()));
        }
        let (a, b) = self.affine_split(c, s, order);
        let s0 = s[c];
        let nodes = 32;
        let mut deriv = DMatrix::zeros(a.nrows(), a.ncols());
        let mut sup: f64 = 0.0;
        for q in 0..nodes {
            let th = 2.0 * std::f64::consts::PI * q as f64 / nodes as f64;
            let (re, im) = (s0 + rho * th.cos(), rho * th.sin());
            // G(s) = A + s B entrywise; real part of G(s) e^{-i th} / rho
            let gre = &a + &b * re;
            let gim = &b * im;
            deriv += (&gre * th.cos() + &gim * th.sin()) / (rho * nodes as f64);
            let mag = gre.zip_map(&gim, |x, y| x.hypot(y));
            sup = sup.max(linalg::max_abs(&mag));
        }
        let h = 1e-3;
        let fd = ((&a + &b * (s0 + h)) - (&a + &b * (s0 - h))) / (2.0 * h);
        let derivative_norm = linalg::max_abs(&deriv);
        let cauchy_bound = sup / rho;
        Ok(WeakeningCheck {
            cube: c,
            kappa1,
            derivative_norm,
            contour_error: linalg::max_abs(&(&deriv - &b)),
            finite_difference_error: linalg::max_abs(&(&fd - &deriv)),
            sup_on_circle: sup,
            cauchy_bound,
            bound_holds: derivative_norm <= cauchy_bound * (1.0 + 1e-12),
        })
    }
}

fn weight(mask: u128, s: &[f64]) -> f64 {
    (0..s.len()).filter(|&i| mask & (1u128 << i) != 0).map(|i| s[i]).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(m: u32) -> (LatticeGeometry, RegionSequence, ActionParams) {
        // 1D, L = 2, one level on the full torus, 8 cubes
        let g = LatticeGeometry::new(2, m, 6, 5, 1, 1).unwrap();
        let seq = RegionSequence::full(&g).unwrap();
        (g, seq, ActionParams::new(1.0, 2, 1, 0.0, 2))
    }

    #[test]
    fn partition_and_split() {
        let (g, seq, p) = setup(2);
        let w = RandomWalkExpansion::new(&g, &seq, &p).unwrap();
        assert!(w.partition_defect() < 1e-13);
        assert!(w.residual_split_defect() < 1e-12);
    }

    #[test]
    fn zero_weakening_is_parametrix() {
        let (g, seq, p) = setup(2);
        let w = RandomWalkExpansion::new(&g, &seq, &p).unwrap();
        let z = vec![0.0; w.cover.len()];
        let g0 = w.weakened(&z, 3).unwrap();
        assert!(linalg::max_abs(&(g0 - &w.parametrix)) == 0.0);
    }

    #[test]
    fn unit_weakening_matches_partial_sum() {
        let (g, seq, p) = setup(2);
        let w = RandomWalkExpansion::new(&g, &seq, &p).unwrap();
        let one = vec![1.0; w.cover.len()];
        let gw = w.weakened(&one, 3).unwrap();
        let mut t = w.parametrix.clone();
        let mut sum = t.clone();
        for _ in 0..3 {
            t = &t * &w.residual;
            sum += &t;
        }
        assert!(linalg::max_abs(&(gw - sum)) < 1e-12 * linalg::max_abs(&w.parametrix));
    }

    #[test]
    fn restricted_sum_limits() {
        let (g, seq, p) = setup(2);
        let w = RandomWalkExpansion::new(&g, &seq, &p).unwrap();
        let all = w.restricted(&vec![true; w.cover.len()]).unwrap();
        let dense = w.sys.green().unwrap();
        assert!(linalg::max_abs(&(all - dense)) < 1e-12);
        let none = w.restricted(&vec![false; w.cover.len()]).unwrap();
        assert!(linalg::max_abs(&(none - &w.parametrix)) < 1e-14);
    }

    #[test]
    fn derivative_checks() {
        let (g, seq, p) = setup(2);
        let w = RandomWalkExpansion::new(&g, &seq, &p).unwrap();
        let s = vec![0.7; w.cover.len()];
        let chk = w.weakening_check(1, &s, 0.5, 3, 4).unwrap();
        assert!(chk.contour_error < 1e-12 && chk.finite_difference_error < 1e-8 && chk.bound_holds);
        // order 0: no walk depends on any cube
        let chk0 = w.weakening_check(1, &s, 0.5, 0, 4).unwrap();
        assert!(chk0.derivative_norm < 1e-15);
        assert!(w.weakening_check(1, &s, 2.0, 3, 4).is_err());
    }
}

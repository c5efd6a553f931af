//! The fluctuation covariance on `Omega_{k+1}`, its resolvent family, square roots by
//! an `r`-integral, localized square roots and the determinant bookkeeping they need.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::blockavg;
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, MultiscaleLayout, Region, RegionSequence, SiteSet};
use crate::greens::{truncate, GreenSystem, RandomWalkExpansion};
use crate::linalg;
use crate::quadforms::{fluct_kernel_delta, neg_laplacian_matrix, ActionParams, DenseOperator};

/// Gauss-Legendre rule on `[0, inf)` after `r = tan^2 theta`.
#[derive(Clone, Debug, Serialize)]
pub struct RQuadrature {
    pub nodes: usize,
    /// `r_i` and the weights for `(1/pi) int dr / sqrt(r) f(r)`.
    pub sqrt_points: Vec<(f64, f64)>,
    /// `r_i` and the weights for `int dr f(r)`.
    pub plain_points: Vec<(f64, f64)>,
}

impl RQuadrature {
    pub fn new(nodes: usize) -> Self {
        let (x, w) = linalg::gauss_legendre(nodes);
        let q = std::f64::consts::FRAC_PI_4;
        let mut sqrt_points = Vec::with_capacity(nodes);
        let mut plain_points = Vec::with_capacity(nodes);
        for (x, w) in x.iter().zip(&w) {
            let th = q * (x + 1.0);
            let (s, c) = th.sin_cos();
            let r = (s / c).powi(2);
            sqrt_points.push((r, 0.5 * w / (c * c)));
            plain_points.push((r, q * w * 2.0 * s / (c * c * c)));
        }
        RQuadrature { nodes, sqrt_points, plain_points }
    }

    /// The rule applied to a scalar `c`: approximates `sqrt(c)`.
    pub fn scalar_sqrt(&self, c: f64) -> f64 {
        self.sqrt_points.iter().map(|(r, w)| w / (1.0 / c + r)).sum()
    }

    /// `sup |rule(c) - sqrt(c)|` over a log grid on `[lo, hi]`.
    pub fn scalar_error(&self, lo: f64, hi: f64) -> f64 {
        let n = 2000;
        let (a, b) = (lo.ln(), hi.ln());
        (0..=n)
            .map(|i| {
                let c = (a + (b - a) * i as f64 / n as f64).exp();
                (self.scalar_sqrt(c) - c.sqrt()).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// `(1/pi) int dr / sqrt(r) C_r` for a resolvent family `C_r = (C^{-1} + r)^{-1}`.
pub fn sqrt_via_integral(quad: &RQuadrature, resolvent: impl Fn(f64) -> Result<DMatrix<f64>> + Sync) -> Result<DMatrix<f64>> {
    let parts: Vec<DMatrix<f64>> = quad
        .sqrt_points
        .par_iter()
        .map(|&(r, w)| resolvent(r).map(|m| m * w))
        .collect::<Result<_>>()?;
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| Error::Precondition("empty quadrature".into()))?;
    let s = it.fold(first, |acc, m| acc + m);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergence("square-root quadrature produced non-finite entries".into()));
    }
    Ok(linalg::symmetrize(&s))
}

#[derive(Clone, Debug, Serialize)]
pub struct SqrtCheck {
    /// `max |S - C^{1/2}_spectral|`.
    pub spectral_diff: f64,
    /// `||S^2 - C||_2`.
    pub square_defect: f64,
    /// Bound on `square_defect` from the scalar rule over the spectrum of `C`.
    pub certificate: f64,
    pub within: bool,
}

/// Compare a quadrature square root with the spectral one and with the quadrature bound.
pub fn check_sqrt(c: &DMatrix<f64>, s: &DMatrix<f64>, quad: &RQuadrature) -> SqrtCheck {
    let ev = linalg::symmetrize(c).symmetric_eigen().eigenvalues;
    let lo = ev.min();
    let hi = ev.max();
    let eps = quad.scalar_error(lo, hi);
    let spectral = linalg::sym_function(c, f64::sqrt);
    let spectral_diff = linalg::max_abs(&(s - spectral));
    let square_defect = linalg::op_norm(&(s * s - c));
    // roundoff in assembling S from the resolvents is a few ulps of ||C||
    let certificate = eps * (2.0 * hi.sqrt() + eps) + 1e-13 * hi * c.nrows() as f64;
    SqrtCheck { spectral_diff, square_defect, certificate, within: square_defect <= certificate }
}

/// `[-Delta + a L^{-2} Q^T Q]^{-1}` on `omega1` for a unit lattice (`k = 0`), where `Q`
/// averages over `L`-blocks; `omega1` must be a union of such blocks.
pub fn unit_covariance(geom: &LatticeGeometry, omega1: &SiteSet, a: f64) -> Result<DenseOperator> {
    if geom.k != 0 {
        return Err(Error::Precondition("unit covariance needs a level-0 lattice".into()));
    }
    let sites = omega1.indices();
    let l = geom.l;
    let n_block = l.pow(geom.d as u32) as f64;
    if sites.iter().any(|&x| geom.block_sites(geom.block_of(x, 1), 1).iter().any(|&y| !omega1.contains(y))) {
        return Err(Error::Precondition("Omega_1 is not a union of L-blocks".into()));
    }
    let lap = neg_laplacian_matrix(geom);
    let mass = a / (l * l) as f64;
    let mut m = linalg::submatrix(&lap, &sites, &sites);
    for (i, &x) in sites.iter().enumerate() {
        for (j, &y) in sites.iter().enumerate() {
            if geom.block_of(x, 1) == geom.block_of(y, 1) {
                m[(i, j)] += mass / n_block;
            }
        }
    }
    let c = linalg::symmetrize(&linalg::spd_inverse(&m)?);
    Ok(DenseOperator::uniform(sites, c, 1.0))
}

/// `E[z z^T]` under the density proportional to `exp(-<z, P z>/2)` by tensor
/// Gauss-Hermite quadrature in every coordinate (small dimension only).
pub fn gaussian_moments(precision: &DMatrix<f64>, nodes: usize) -> Result<DMatrix<f64>> {
    let n = precision.nrows();
    let total = (nodes as f64).powi(n as i32);
    if n == 0 || total > 1e8 {
        return Err(Error::Cap(format!("{nodes}^{n} quadrature points")));
    }
    let (x, w) = linalg::gauss_hermite_normal(nodes);
    // z = sigma u with u standard normal under the rule
    let sigma = (n as f64 / precision.trace()).sqrt();
    let shifted = precision * (sigma * sigma) - DMatrix::identity(n, n);
    let mut idx = vec![0usize; n];
    let mut mass = 0.0;
    let mut second = DMatrix::zeros(n, n);
    let mut u = DVector::zeros(n);
    loop {
        let mut wt = 1.0;
        for i in 0..n {
            u[i] = x[idx[i]];
            wt *= w[idx[i]];
        }
        let f = wt * (-0.5 * u.dot(&(&shifted * &u))).exp();
        mass += f;
        second += &u * u.transpose() * f;
        let mut p = 0;
        loop {
            if p == n {
                return Ok(second * (sigma * sigma / mass));
            }
            idx[p] += 1;
            if idx[p] < nodes {
                break;
            }
            idx[p] = 0;
            p += 1;
        }
    }
}

/// The covariance `C = [Delta_{k,Omega} + a L^{-2} Q^T Q]^{-1}` on the unit blocks of
/// `Omega_{k+1}` and the pieces of its resolvent representation.
#[derive(Clone, Debug)]
pub struct FluctuationProblem {
    pub geom: LatticeGeometry,
    pub seq_plus: RegionSequence,
    pub params: ActionParams,
    pub a_k: f64,
    /// `a L^{-2}`.
    pub mass: f64,
    /// Level-`k` blocks in `Omega_{k+1}`.
    pub top_blocks: Vec<usize>,
    /// `Q^T Q` on those blocks.
    pub proj: DMatrix<f64>,
    /// `Delta_{k,Omega}` on those blocks.
    pub kernel: DMatrix<f64>,
    /// `G` operator with the stiffness on `Omega_{k+1}` removed.
    base: GreenSystem,
    /// `Q_k` from `Omega_1` sites to the top blocks.
    qk: DMatrix<f64>,
    qkt: DMatrix<f64>,
}

impl FluctuationProblem {
    pub fn new(geom: &LatticeGeometry, seq_plus: &RegionSequence, params: &ActionParams) -> Result<Self> {
        let k = geom.k as usize;
        if k == 0 || seq_plus.depth() != k + 1 {
            return Err(Error::Precondition(format!("need k >= 1 and depth k+1, got k={k}, depth {}", seq_plus.depth())));
        }
        let seq = truncate(geom, seq_plus)?;
        let omega_plus = seq_plus.regions[k].site_set(geom);
        if omega_plus.is_empty() {
            return Err(Error::Precondition("Omega_{k+1} is empty".into()));
        }
        let layout = MultiscaleLayout::new(geom, &seq, false);
        let top: Vec<usize> =
            layout.positions_at_level(k).into_iter().filter(|&p| omega_plus.contains(layout.entries[p].sites[0])).collect();
        let top_blocks: Vec<usize> = top.iter().map(|&p| layout.entries[p].block).collect();
        let kernel = linalg::submatrix(&fluct_kernel_delta(geom, &seq, params)?.mat, &top, &top);
        let nd = (params.l as f64).powi(geom.d as i32);
        let parent: Vec<usize> = top.iter().map(|&p| geom.block_of(layout.entries[p].sites[0], geom.k + 1)).collect();
        let proj = DMatrix::from_fn(top.len(), top.len(), |i, j| if parent[i] == parent[j] { 1.0 / nd } else { 0.0 });
        let mut stiff = params.layout_stiffness(&layout);
        for &p in &top {
            stiff[p] = 0.0;
        }
        let base = GreenSystem::with_stiffness(geom, &seq, stiff, params.mu_bar)?;
        let qk = linalg::submatrix(&blockavg::layout_matrix(&layout, geom.n_sites()), &top, &base.sites);
        let qkt = blockavg::layout_adjoint_matrix(&layout, geom).select_rows(base.sites.iter()).select_columns(top.iter());
        let l2 = (params.l * params.l) as f64;
        Ok(FluctuationProblem {
            geom: geom.clone(),
            seq_plus: seq_plus.clone(),
            params: params.clone(),
            a_k: params.a_level(k),
            mass: params.a / l2,
            top_blocks,
            proj,
            kernel,
            base,
            qk,
            qkt,
        })
    }

    /// The same problem with every region full, which has the translation-invariant
    /// global operators.
    pub fn global(geom: &LatticeGeometry, params: &ActionParams) -> Result<Self> {
        let regions = (1..=geom.k + 1).map(|j| Region::full(geom, geom.cube_side(j))).collect::<Result<Vec<_>>>()?;
        Self::new(geom, &RegionSequence::new(geom, regions)?, params)
    }

    pub fn n_top(&self) -> usize {
        self.top_blocks.len()
    }

    /// `C^{-1} = Delta_{k,Omega} + a L^{-2} Q^T Q` on the top blocks.
    pub fn precision(&self) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.kernel + &self.proj * self.mass))
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(linalg::symmetrize(&linalg::spd_inverse(&self.precision())?))
    }

    /// `C_r = [C^{-1} + r]^{-1}` by a direct inverse.
    pub fn resolvent(&self, r: f64) -> Result<DMatrix<f64>> {
        let n = self.n_top();
        linalg::spd_inverse(&(self.precision() + DMatrix::identity(n, n) * r))
    }

    fn projection_function(&self, off: f64, on: f64) -> DMatrix<f64> {
        let n = self.n_top();
        DMatrix::identity(n, n) * off + &self.proj * (on - off)
    }

    pub fn a_op(&self, r: f64) -> DMatrix<f64> {
        self.projection_function(1.0 / (self.a_k + r), 1.0 / (self.a_k + self.mass + r))
    }

    pub fn b_op(&self, r: f64) -> DMatrix<f64> {
        self.projection_function(r / (self.a_k + r), (self.mass + r) / (self.a_k + self.mass + r))
    }

    /// `a_k Q_k^T B_r Q_k` on `Omega_1` sites.
    fn b_term(&self, r: f64) -> DMatrix<f64> {
        &self.qkt * self.b_op(r) * &self.qk * self.a_k
    }

    /// The system whose inverse is `G_r`.
    pub fn green_system(&self, r: f64) -> GreenSystem {
        let mut sys = self.base.clone();
        sys.h += self.b_term(r);
        sys
    }

    /// `A_r + a_k^2 A_r Q_k G Q_k^T A_r` for a given `G` on `Omega_1` sites.
    pub fn resolvent_from(&self, r: f64, g: &DMatrix<f64>) -> DMatrix<f64> {
        let a = self.a_op(r);
        &a + &a * &self.qk * g * &self.qkt * &a * (self.a_k * self.a_k)
    }

    /// `C_r` through `G_r`.
    pub fn resolvent_via_green(&self, r: f64) -> Result<DMatrix<f64>> {
        let g = self.green_system(r).green()?;
        Ok(linalg::symmetrize(&self.resolvent_from(r, &g)))
    }

    /// `max |C_r - (A_r + a_k^2 A_r Q_k G_r Q_k^T A_r)|`.
    pub fn resolvent_identity_residual(&self, r: f64) -> Result<f64> {
        Ok(linalg::max_abs(&(self.resolvent(r)? - self.resolvent_via_green(r)?)))
    }

    /// `a_k Q_k^T B_r Q_k` against its split into a `Q_k^T Q_k` and a `Q_{k+1}^T Q_{k+1}`
    /// piece, the latter built from the geometry directly.
    pub fn split_residual(&self, r: f64) -> f64 {
        let g = &self.geom;
        let k = g.k;
        let top: std::collections::HashSet<usize> = self.top_blocks.iter().cloned().collect();
        let sites = &self.base.sites;
        let n = sites.len();
        let in_top: Vec<bool> = sites.iter().map(|&x| top.contains(&g.block_of(x, k))).collect();
        let fine_k = g.block_sites(0, k).len() as f64;
        let fine_k1 = g.block_sites(0, k + 1).len() as f64;
        let qq_k = DMatrix::from_fn(n, n, |i, j| {
            if in_top[i] && in_top[j] && g.block_of(sites[i], k) == g.block_of(sites[j], k) {
                1.0 / fine_k
            } else {
                0.0
            }
        });
        let qq_k1 = DMatrix::from_fn(n, n, |i, j| {
            if in_top[i] && in_top[j] && g.block_of(sites[i], k + 1) == g.block_of(sites[j], k + 1) {
                1.0 / fine_k1
            } else {
                0.0
            }
        });
        let (ak, m) = (self.a_k, self.mass);
        let split = qq_k * (ak * r / (ak + r)) + qq_k1 * (ak * ak * m / ((ak + r) * (ak + m + r)));
        linalg::max_abs(&(self.b_term(r) - split))
    }

    pub fn sqrt_spectral(&self) -> Result<DMatrix<f64>> {
        Ok(linalg::sym_function(&self.covariance()?, f64::sqrt))
    }

    pub fn sqrt_integral(&self, quad: &RQuadrature) -> Result<DMatrix<f64>> {
        sqrt_via_integral(quad, |r| self.resolvent_via_green(r))
    }

    /// `log C^{-1}` from the `r`-integral of `A Q_k G_r Q_k^T A`.
    pub fn log_precision_integral(&self, quad: &RQuadrature) -> Result<DMatrix<f64>> {
        let m = self.mass;
        let head = self.projection_function(self.a_k.ln(), (self.a_k + m).ln());
        Ok(head - self.integrated_green_term(quad)? * (self.a_k * self.a_k))
    }

    /// `int dr A_r Q_k G_r Q_k^T A_r` on the top blocks.
    pub fn integrated_green_term(&self, quad: &RQuadrature) -> Result<DMatrix<f64>> {
        let parts: Vec<DMatrix<f64>> = quad
            .plain_points
            .par_iter()
            .map(|&(r, w)| -> Result<DMatrix<f64>> {
                let g = self.green_system(r).green()?;
                let a = self.a_op(r);
                Ok(&a * &self.qk * g * &self.qkt * &a * w)
            })
            .collect::<Result<_>>()?;
        let n = self.n_top();
        Ok(parts.into_iter().fold(DMatrix::zeros(n, n), |a, m| a + m))
    }

    /// The cubes of `Omega_{k+1}` and the top-block indices inside each.
    pub fn top_cubes(&self) -> Vec<(usize, Vec<usize>)> {
        let g = &self.geom;
        let reg = &self.seq_plus.regions[g.k as usize];
        reg.cube_indices()
            .into_iter()
            .map(|c| {
                let sites = SiteSet::from_indices(g.n_sites(), reg.cube_sites(g, c));
                let idx = (0..self.n_top()).filter(|&i| sites.contains(g.block_sites(self.top_blocks[i], g.k)[0])).collect();
                (c, idx)
            })
            .collect()
    }

    fn star_sites(&self, cube: usize, layers: usize) -> SiteSet {
        let reg = &self.seq_plus.regions[self.geom.k as usize];
        let single = Region::from_mask(reg.cube_side, reg.grid, reg.d, (0..reg.n_cubes()).map(|i| i == cube).collect());
        single.enlarge(layers).site_set(&self.geom)
    }

    /// `(C^{1/2})^loc = sum_box 1_box C^{1/2}(box*)` for each requested number of layers,
    /// where `C^{1/2}(box*)` uses the walk expansion of `G_r` with weakening parameters
    /// equal to one on the cubes inside `box*` and zero elsewhere.
    pub fn localized_sqrt(&self, layers: &[usize], quad: &RQuadrature) -> Result<LocalizedFamily> {
        let n = self.n_top();
        let cubes = self.top_cubes();
        let stars: Vec<Vec<SiteSet>> =
            layers.iter().map(|&r| cubes.iter().map(|(c, _)| self.star_sites(*c, r)).collect()).collect();
        let geom = &self.geom;
        let per_node: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)> = quad
            .sqrt_points
            .par_iter()
            .map(|&(r, w)| -> Result<_> {
                let walk = RandomWalkExpansion::from_system(geom, &self.seq_plus, self.green_system(r))?;
                let full = self.resolvent_from(r, &walk.sys.green()?) * w;
                let a = self.a_op(r);
                let aq = &a * &self.qk;
                let qta = &self.qkt * &a;
                let mut locs = Vec::with_capacity(layers.len());
                for st in &stars {
                    let mut loc = DMatrix::zeros(n, n);
                    for ((_, rows), star) in cubes.iter().zip(st) {
                        let keep: Vec<bool> = walk.cover.iter().map(|c| c.sites.is_subset(star)).collect();
                        let g = walk.restricted(&keep)?;
                        let rows_aq = aq.select_rows(rows.iter());
                        let block = a.select_rows(rows.iter()) + &rows_aq * g * &qta * (self.a_k * self.a_k);
                        for (i, &row) in rows.iter().enumerate() {
                            for j in 0..n {
                                loc[(row, j)] += w * block[(i, j)];
                            }
                        }
                    }
                    locs.push(loc);
                }
                Ok((full, locs))
            })
            .collect::<Result<_>>()?;
        let mut sqrt = DMatrix::zeros(n, n);
        let mut locs = vec![DMatrix::zeros(n, n); layers.len()];
        for (f, ls) in per_node {
            sqrt += f;
            for (acc, l) in locs.iter_mut().zip(ls) {
                *acc += l;
            }
        }
        let sqrt = linalg::symmetrize(&sqrt);
        let sqrt_norm = linalg::inf_norm(&sqrt);
        let members = layers
            .iter()
            .zip(locs)
            .zip(&stars)
            .map(|((&lay, loc), st)| {
                let delta = &sqrt - &loc;
                let mut leak: f64 = 0.0;
                for ((_, rows), star) in cubes.iter().zip(st) {
                    for &i in rows {
                        for j in 0..n {
                            if !star.contains(geom.block_sites(self.top_blocks[j], geom.k)[0]) {
                                leak = leak.max(loc[(i, j)].abs());
                            }
                        }
                    }
                }
                LocalizedSqrt { layers: lay, delta_norm: linalg::inf_norm(&delta), delta_rel: linalg::inf_norm(&delta) / sqrt_norm, leak, loc, delta }
            })
            .collect();
        Ok(LocalizedFamily { sqrt, cubes: cubes.into_iter().map(|(_, r)| r).collect(), members })
    }

    /// Per-cube `int dr sum_{y in box} (A_r Q_k (G_r - G_r^glob) Q_k^T A_r)(y, y)` scaled
    /// by `a_k^2 / 2`, together with the boundary constants.
    pub fn determinant_split(&self, global: &FluctuationProblem, quad: &RQuadrature) -> Result<DeterminantSplit> {
        let local = self.integrated_green_term(quad)?;
        let glob = global.integrated_green_term(quad)?;
        let gindex: std::collections::HashMap<usize, usize> =
            global.top_blocks.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let diag_glob: Vec<f64> = self.top_blocks.iter().map(|b| glob[(gindex[b], gindex[b])]).collect();
        let ak2 = self.a_k * self.a_k;
        let cubes = self.top_cubes();
        let r6_per_cube: Vec<f64> = cubes
            .iter()
            .map(|(_, rows)| 0.5 * ak2 * rows.iter().map(|&i| local[(i, i)] - diag_glob[i]).sum::<f64>())
            .collect();
        let r6: f64 = r6_per_cube.iter().sum();
        let gd: Vec<f64> = (0..global.n_top()).map(|i| glob[(i, i)]).collect();
        let b_prime = gd.iter().sum::<f64>() / gd.len() as f64;
        let b_prime_spread = gd.iter().map(|v| (v - b_prime).abs()).fold(0.0, f64::max);
        let consts = BoundaryConstants::new(self.a_k, self.mass, self.params.l, self.geom.d, b_prime);
        let outside = (global.n_top() - self.n_top()) as f64;
        let predicted = 0.5 * consts.b_dprime * outside + r6;
        let direct = -0.5 * linalg::logdet_spd(&self.precision())? + 0.5 * linalg::logdet_spd(&global.precision())?;
        Ok(DeterminantSplit { r6_per_cube, r6, consts, b_prime_spread, outside_blocks: outside as usize, predicted, direct })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryConstants {
    pub b: f64,
    pub b_prime: f64,
    /// `b - a_k^2 b'`.
    pub b_dprime: f64,
    /// `b'' - log 2 pi`.
    pub c_next: f64,
}

impl BoundaryConstants {
    pub fn new(a_k: f64, mass: f64, l: usize, d: usize, b_prime: f64) -> Self {
        let f = (l as f64).powi(-(d as i32));
        let b = (1.0 - f) * a_k.ln() + f * (a_k + mass).ln();
        let b_dprime = b - a_k * a_k * b_prime;
        BoundaryConstants { b, b_prime, b_dprime, c_next: b_dprime - (2.0 * std::f64::consts::PI).ln() }
    }
}

/// `log det` of the covariance on `Omega_{k+1}` against the global one.
#[derive(Clone, Debug, Serialize)]
pub struct DeterminantSplit {
    pub r6_per_cube: Vec<f64>,
    pub r6: f64,
    pub consts: BoundaryConstants,
    /// Largest deviation of the global diagonal from its mean.
    pub b_prime_spread: f64,
    pub outside_blocks: usize,
    /// `b''/2 |Omega^c| + R6`.
    pub predicted: f64,
    /// `-1/2 log det C^{-1} + 1/2 log det C_glob^{-1}`.
    pub direct: f64,
}

#[derive(Clone, Debug)]
pub struct LocalizedSqrt {
    pub layers: usize,
    pub loc: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    /// `||delta||_{inf -> inf}`.
    pub delta_norm: f64,
    pub delta_rel: f64,
    /// Largest entry of `loc` from a cube to a block outside its enlargement.
    pub leak: f64,
}

#[derive(Clone, Debug)]
pub struct LocalizedFamily {
    pub sqrt: DMatrix<f64>,
    /// Top-block indices per cube of `Omega_{k+1}`.
    pub cubes: Vec<Vec<usize>>,
    pub members: Vec<LocalizedSqrt>,
}

/// `loc^{-1} = sum_n (C^{-1/2} delta)^n C^{-1/2}`, with the number of terms used.
pub fn loc_inverse_series(sqrt: &DMatrix<f64>, delta: &DMatrix<f64>, tol: f64, max_terms: usize) -> Result<(DMatrix<f64>, usize)> {
    let inv_sqrt = linalg::inverse(sqrt)?;
    let x = &inv_sqrt * delta;
    let rho = linalg::op_norm(&x);
    if rho >= 1.0 {
        return Err(Error::NonConvergence(format!("||C^(-1/2) delta|| = {rho:.3} >= 1")));
    }
    let mut term = inv_sqrt.clone();
    let mut sum = term.clone();
    for n in 1..=max_terms {
        term = &x * term;
        sum += &term;
        if linalg::max_abs(&term) <= tol * linalg::max_abs(&sum) {
            return Ok((sum, n));
        }
    }
    Err(Error::NonConvergence(format!("series not below {tol:e} after {max_terms} terms")))
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceLogReport {
    pub per_cube: Vec<f64>,
    pub series: f64,
    /// `log |det loc| - log det C^{1/2}`.
    pub direct: f64,
    /// `|exp(series - direct) - 1|`.
    pub det_rel_err: f64,
    pub terms: usize,
}

/// `-sum_n (1/n) tr (C^{-1/2} delta)^n`, split by the rows of each cube.
pub fn trace_log_correction(
    sqrt: &DMatrix<f64>,
    loc: &DMatrix<f64>,
    cubes: &[Vec<usize>],
    tol: f64,
    max_terms: usize,
) -> Result<TraceLogReport> {
    let delta = sqrt - loc;
    let x = linalg::inverse(sqrt)? * &delta;
    let mut per_cube = vec![0.0; cubes.len()];
    let mut pow = x.clone();
    let mut terms = 0;
    for n in 1..=max_terms {
        terms = n;
        let tr = pow.trace();
        for (acc, rows) in per_cube.iter_mut().zip(cubes) {
            *acc -= rows.iter().map(|&i| pow[(i, i)]).sum::<f64>() / n as f64;
        }
        if tr.abs() / (n as f64) < tol && linalg::max_abs(&pow) < tol {
            break;
        }
        if n == max_terms {
            return Err(Error::NonConvergence(format!("trace-log series not below {tol:e} after {max_terms} terms")));
        }
        pow = &pow * &x;
    }
    let series: f64 = per_cube.iter().sum();
    let lu = loc.clone().lu();
    let direct = lu.u().diagonal().iter().map(|v| v.abs().ln()).sum::<f64>() - 0.5 * linalg::logdet_spd(&(sqrt * sqrt))?;
    Ok(TraceLogReport { per_cube, series, direct, det_rel_err: (series - direct).exp_m1().abs(), terms })
}

#[derive(Clone, Debug, Serialize)]
pub struct ChangeOfVariables {
    pub r4: f64,
    pub r4_per_cube: Vec<f64>,
    /// `1/2 <loc W, C^{-1} loc W>`.
    pub form: f64,
    /// `|form - (|W|^2/2 - R4)|`.
    pub residual: f64,
}

/// `1/2 <loc W, C^{-1} loc W> = 1/2 |W|^2 - R4` with
/// `R4 = <C^{-1/2} W, delta W> - 1/2 <delta W, C^{-1} delta W>`.
pub fn change_of_variables(
    cov: &DMatrix<f64>,
    sqrt: &DMatrix<f64>,
    loc: &DMatrix<f64>,
    cubes: &[Vec<usize>],
    w: &DVector<f64>,
) -> Result<ChangeOfVariables> {
    let prec = linalg::symmetrize(&linalg::spd_inverse(cov)?);
    // C^{-1/2} from the same square root, so C^{-1/2} C^{1/2} = I up to the quadrature
    let inv_sqrt = linalg::inverse(sqrt)?;
    let dw = (sqrt - loc) * w;
    let a = &inv_sqrt * w;
    let b = &prec * &dw;
    let r4_per_cube: Vec<f64> =
        cubes.iter().map(|rows| rows.iter().map(|&i| a[i] * dw[i] - 0.5 * dw[i] * b[i]).sum()).collect();
    let r4: f64 = r4_per_cube.iter().sum();
    let lw = loc * w;
    let form = 0.5 * lw.dot(&(&prec * &lw));
    let residual = (form - (0.5 * w.norm_squared() - r4)).abs();
    Ok(ChangeOfVariables { r4, r4_per_cube, form, residual })
}

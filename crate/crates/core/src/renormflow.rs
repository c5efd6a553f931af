//! Extraction of vacuum-energy and mass counterterms from local functionals,
//! the boundary pieces left over on a region, reblocking, and the coupling
//! recursion.
//!
//! Conventions, on a lattice of spacing `eta` in `d` dimensions:
//! `Vol(X) = eta^d |X|`, `int_X f = eta^d sum_{x in X} f(x)`, and
//! `int_X phi d_mu phi = eta^d sum_{x in X} phi(x) (phi(x + eta e_mu) - phi(x)) / eta`,
//! which reads `phi` one site past `X` in the `+mu` direction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fieldregions::{cubes_of, CubeLattice, CubeMask};
use crate::geometry::{coords_in, index_in, king_offsets, LatticeGeometry, MAX_DIM};
use crate::quadforms::CouplingState;

/// Anything that can be evaluated on a full-lattice field.
pub trait Functional: Sync {
    fn eval(&self, phi: &[f64]) -> f64;

    /// `E_2(0; f, g)`; the default is a central difference with one Richardson step.
    fn second(&self, f: &[f64], g: &[f64]) -> f64 {
        numeric_second(|v| self.eval(v), f, g, 1e-4)
    }
}

/// Mixed second derivative at zero by central differences with step `h` and `h/2`,
/// combined by Richardson extrapolation.
pub fn numeric_second(e: impl Fn(&[f64]) -> f64, f: &[f64], g: &[f64], h: f64) -> f64 {
    let at = |s: f64, t: f64| -> f64 {
        let v: Vec<f64> = f.iter().zip(g).map(|(a, b)| s * a + t * b).collect();
        e(&v)
    };
    let d = |h: f64| (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

/// A black-box functional; second derivatives by finite differences.
pub struct BlackBox<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Functional for BlackBox<F> {
    fn eval(&self, phi: &[f64]) -> f64 {
        (self.0)(phi)
    }
}

/// Polynomial in the site values: each key is a sorted multiset of sites, the value its coefficient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolyFunctional {
    pub terms: BTreeMap<Vec<usize>, f64>,
}

impl PolyFunctional {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, sites: &[usize], c: f64) {
        let mut key = sites.to_vec();
        key.sort_unstable();
        *self.terms.entry(key).or_insert(0.0) += c;
    }

    pub fn plus(&mut self, o: &PolyFunctional, scale: f64) {
        for (k, &c) in &o.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += scale * c;
        }
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Vec::len).max().unwrap_or(0)
    }

    /// Monomials of exactly degree `n`.
    pub fn part(&self, n: usize) -> PolyFunctional {
        PolyFunctional { terms: self.terms.iter().filter(|(k, _)| k.len() == n).map(|(k, &c)| (k.clone(), c)).collect() }
    }

    pub fn support(&self) -> BTreeSet<usize> {
        self.terms.keys().flatten().copied().collect()
    }

    pub fn max_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }
}

impl Functional for PolyFunctional {
    fn eval(&self, phi: &[f64]) -> f64 {
        self.terms.iter().map(|(k, c)| c * k.iter().map(|&i| phi[i]).product::<f64>()).sum()
    }

    fn second(&self, f: &[f64], g: &[f64]) -> f64 {
        self.terms
            .iter()
            .filter(|(k, _)| k.len() == 2)
            .map(|(k, c)| c * (f[k[0]] * g[k[1]] + f[k[1]] * g[k[0]]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Alphas {
    pub alpha0: f64,
    pub alpha2: f64,
    pub alpha2mu: Vec<f64>,
}

/// Coordinate offsets of every site from `base`, minimal image, in lattice units.
fn offsets_from(geom: &LatticeGeometry, base: usize) -> Vec<[f64; MAX_DIM]> {
    let side = geom.side() as isize;
    let b = geom.coords(base);
    (0..geom.n_sites())
        .map(|i| {
            let c = geom.coords(i);
            let mut o = [0.0; MAX_DIM];
            for mu in 0..geom.d {
                let mut t = (c[mu] as isize - b[mu] as isize).rem_euclid(side);
                if 2 * t >= side {
                    t -= side;
                }
                o[mu] = t as f64;
            }
            o
        })
        .collect()
}

fn check_extent(geom: &LatticeGeometry, x: &[usize], base: usize) -> Result<()> {
    let side = geom.side() as f64;
    let off = offsets_from(geom, base);
    for &i in x {
        if (0..geom.d).any(|mu| 2.0 * (off[i][mu].abs() + 1.0) >= side) {
            return Err(Error::Precondition("set too wide for the torus to define x - x0".into()));
        }
    }
    Ok(())
}

/// `alpha_0 = E(X,0)/Vol(X)`, `alpha_2 = E_2(1,1)/(2 Vol)` and
/// `alpha_{2,mu} = (E_2(1, x_mu - x0_mu) - E_2(1,1) int_X (x_mu - x0_mu) / Vol) / Vol`.
pub fn extract_alphas(geom: &LatticeGeometry, x: &[usize], e: &dyn Functional, base: usize) -> Result<Alphas> {
    if x.is_empty() {
        return Err(Error::Precondition("empty set".into()));
    }
    check_extent(geom, x, base)?;
    let n = geom.n_sites();
    let eta = geom.spacing();
    let w = geom.site_weight();
    let vol = w * x.len() as f64;
    let zero = vec![0.0; n];
    let one = vec![1.0; n];
    let e11 = e.second(&one, &one);
    let off = offsets_from(geom, base);
    let alpha2mu = (0..geom.d)
        .map(|mu| {
            let y: Vec<f64> = off.iter().map(|o| o[mu] * eta).collect();
            let int_y: f64 = w * x.iter().map(|&i| y[i]).sum::<f64>();
            (e.second(&one, &y) - e11 * int_y / vol) / vol
        })
        .collect::<Vec<_>>();
    let a = Alphas { alpha0: e.eval(&zero) / vol, alpha2: e11 / (2.0 * vol), alpha2mu };
    if !(a.alpha0.is_finite() && a.alpha2.is_finite() && a.alpha2mu.iter().all(|v| v.is_finite())) {
        return Err(Error::NonConvergence("second derivative is not finite".into()));
    }
    Ok(a)
}

/// `alpha_0 Vol(X) + alpha_2 int_X phi^2 + sum_mu alpha_{2,mu} int_X phi d_mu phi` as a polynomial.
pub fn counterterm(geom: &LatticeGeometry, x: &[usize], a: &Alphas) -> PolyFunctional {
    let w = geom.site_weight();
    let eta = geom.spacing();
    let mut p = PolyFunctional::new();
    p.add(&[], a.alpha0 * w * x.len() as f64);
    for &i in x {
        p.add(&[i, i], a.alpha2 * w);
        for (mu, &c) in a.alpha2mu.iter().enumerate() {
            if c != 0.0 {
                p.add(&[i, geom.shift(i, mu, 1)], c * w / eta);
                p.add(&[i, i], -c * w / eta);
            }
        }
    }
    p.terms.retain(|_, c| *c != 0.0);
    p
}

/// `RE = E - counterterm` for small sets, `RE = E` otherwise.
pub fn renormalized_part(geom: &LatticeGeometry, x: &[usize], e: &PolyFunctional, small: bool) -> Result<(PolyFunctional, Alphas)> {
    if !small {
        return Ok((e.clone(), Alphas { alpha0: 0.0, alpha2: 0.0, alpha2mu: vec![0.0; geom.d] }));
    }
    let a = extract_alphas(geom, x, e, x[0])?;
    let mut r = e.clone();
    r.plus(&counterterm(geom, x, &a), -1.0);
    Ok((r, a))
}

// ------------------------------------------------------------------ families

/// Which cube sets count as small.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SmallSetRule {
    /// Connected (king adjacency) sets of at most this many cubes.
    pub max_cubes: usize,
}

impl Default for SmallSetRule {
    fn default() -> Self {
        SmallSetRule { max_cubes: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct FamilyEntry {
    pub cubes: CubeMask,
    pub sites: Vec<usize>,
    pub e: PolyFunctional,
    pub small: bool,
}

/// `E(X)` for a finite list of cube sets `X` on a periodic cube grid.
#[derive(Clone, Debug)]
pub struct LocalFamily {
    pub geom: LatticeGeometry,
    pub cube_side: usize,
    pub lat: CubeLattice,
    pub rule: SmallSetRule,
    pub entries: Vec<FamilyEntry>,
    cube_sites: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Only reflection-invariant terms.
    pub symmetric: bool,
    /// Also put functionals on straight three-cube sets (large under the default rule).
    pub include_large: bool,
    pub rule: SmallSetRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 1, symmetric: true, include_large: true, rule: SmallSetRule::default() }
    }
}

impl LocalFamily {
    pub fn empty(geom: &LatticeGeometry, cube_side: usize, rule: SmallSetRule) -> Result<Self> {
        let side = geom.side();
        if cube_side == 0 || side % cube_side != 0 {
            return Err(Error::Geometry(format!("cube side {cube_side} does not divide {side}")));
        }
        let grid = side / cube_side;
        let lat = CubeLattice::new(geom.d, grid)?;
        let mut cube_sites = vec![Vec::new(); lat.len()];
        for x in 0..geom.n_sites() {
            let c = geom.coords(x);
            let mut cc = [0; MAX_DIM];
            for mu in 0..geom.d {
                cc[mu] = c[mu] / cube_side;
            }
            cube_sites[index_in(&cc, grid, geom.d)].push(x);
        }
        Ok(LocalFamily { geom: geom.clone(), cube_side, lat, rule, entries: Vec::new(), cube_sites })
    }

    pub fn is_small(&self, cubes: CubeMask) -> bool {
        cubes != 0 && (cubes.count_ones() as usize) <= self.rule.max_cubes && self.lat.is_connected(cubes)
    }

    pub fn sites_of(&self, cubes: CubeMask) -> Vec<usize> {
        let mut s: Vec<usize> = cubes_of(cubes).into_iter().flat_map(|c| self.cube_sites[c].iter().copied()).collect();
        s.sort_unstable();
        s
    }

    pub fn push(&mut self, cubes: CubeMask, e: PolyFunctional) {
        let small = self.is_small(cubes);
        let sites = self.sites_of(cubes);
        self.entries.push(FamilyEntry { cubes, sites, e, small });
    }

    /// Translation-invariant random functionals on every connected set of one or two cubes
    /// (and straight triples if asked). Coefficients depend only on the translation class.
    pub fn synthetic(geom: &LatticeGeometry, cube_side: usize, spec: &SyntheticSpec) -> Result<Self> {
        let mut fam = Self::empty(geom, cube_side, spec.rule)?;
        let d = geom.d;
        let n = fam.lat.n;
        let mut shapes: Vec<CubeMask> = Vec::new();
        for c in 0..fam.lat.len() {
            shapes.push(1 << c);
            for o in king_offsets(d) {
                let m: CubeMask = (1 << c) | (1 << shifted(c, &o, 1, n, d));
                if m.count_ones() == 2 {
                    shapes.push(m);
                }
            }
            if spec.include_large && n >= 4 {
                for mu in 0..d {
                    let mut o = [0isize; MAX_DIM];
                    o[mu] = 1;
                    shapes.push((1 << c) | (1 << shifted(c, &o, 1, n, d)) | (1 << shifted(c, &o, 2, n, d)));
                }
            }
        }
        shapes.sort_unstable();
        shapes.dedup();
        let mut coeffs: BTreeMap<Vec<Vec<isize>>, [f64; 8]> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let classes: BTreeSet<Vec<Vec<isize>>> = shapes.iter().map(|&m| shape_class(&fam.lat, m).0).collect();
        for cl in classes {
            let mut c = [0.0; 8];
            for v in c.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            coeffs.insert(cl, c);
        }
        let w = geom.site_weight();
        let eta = geom.spacing();
        for m in shapes {
            let (cl, anchor) = shape_class(&fam.lat, m);
            let c = coeffs[&cl];
            let sites = fam.sites_of(m);
            let set: BTreeSet<usize> = sites.iter().copied().collect();
            let origin = fam.cube_sites[anchor][0];
            let off = offsets_from(geom, origin);
            let mut e = PolyFunctional::new();
            e.add(&[], c[0]);
            for &x in &sites {
                e.add(&[x], c[1] * w);
                e.add(&[x, x], c[2] * w);
                e.add(&[x, x, x], c[3] * w);
                e.add(&[x, x, x, x], c[4].abs() * w);
                for mu in 0..d {
                    let y = geom.shift(x, mu, 1);
                    if set.contains(&y) {
                        e.add(&[x, y], c[5] * w / (eta * eta));
                    }
                }
                if !spec.symmetric {
                    e.add(&[x, x], c[6] * w * off[x][0]);
                    let y = geom.shift(x, 0, 1);
                    e.add(&[x, y], c[7] * w / eta);
                    e.add(&[x, x], -c[7] * w / eta);
                }
            }
            fam.push(m, e);
        }
        Ok(fam)
    }

    /// `E(Lambda) = sum_{X inside Lambda} E(X)`.
    pub fn total(&self, lambda: CubeMask, phi: &[f64]) -> f64 {
        self.entries.iter().filter(|en| en.cubes & !lambda == 0).map(|en| en.e.eval(phi)).sum()
    }
}

fn shifted(c: usize, o: &[isize; MAX_DIM], times: isize, n: usize, d: usize) -> usize {
    let cc = coords_in(c, n, d);
    let mut t = [0; MAX_DIM];
    for mu in 0..d {
        t[mu] = (cc[mu] as isize + times * o[mu]).rem_euclid(n as isize) as usize;
    }
    index_in(&t, n, d)
}

/// Translation class of a cube set (the lexicographically smallest offset list over anchors)
/// and the anchor cube that realizes it.
fn shape_class(lat: &CubeLattice, m: CubeMask) -> (Vec<Vec<isize>>, usize) {
    let (n, d) = (lat.n, lat.d);
    let cubes = cubes_of(m);
    cubes
        .iter()
        .map(|&a| {
            let ca = coords_in(a, n, d);
            let mut offs: Vec<Vec<isize>> = cubes
                .iter()
                .map(|&b| {
                    let cb = coords_in(b, n, d);
                    (0..d).map(|mu| (cb[mu] as isize - ca[mu] as isize).rem_euclid(n as isize)).collect()
                })
                .collect();
            offs.sort();
            (offs, a)
        })
        .min()
        .expect("nonempty set")
}

// ------------------------------------------------------------- decomposition

#[derive(Clone, Debug, Serialize)]
pub struct Decomposition {
    pub eps: f64,
    pub mu: f64,
    pub nu: Vec<f64>,
    /// Largest change of `eps`, `mu`, `nu` between reference cubes.
    pub translation_spread: f64,
    pub e_lambda: f64,
    pub volume_term: f64,
    pub mass_term: f64,
    pub nu_term: f64,
    pub renormalized: f64,
    /// `sum_{X crossing Lambda, X small} T_Lambda E(X)`.
    pub boundary: f64,
    /// The same boundary sum assembled cube by cube from the region-restricted coefficients.
    pub boundary_direct: f64,
    pub crossing_sets: usize,
    /// `|E(Lambda) - rhs| / max(1, |E(Lambda)|)`.
    pub residual: f64,
}

struct CubeIntegrals {
    vol: f64,
    phi2: f64,
    dphi: Vec<f64>,
}

fn cube_integrals(fam: &LocalFamily, phi: &[f64]) -> Vec<CubeIntegrals> {
    let g = &fam.geom;
    let (w, eta) = (g.site_weight(), g.spacing());
    fam.cube_sites
        .iter()
        .map(|s| CubeIntegrals {
            vol: w * s.len() as f64,
            phi2: w * s.iter().map(|&x| phi[x] * phi[x]).sum::<f64>(),
            dphi: (0..g.d).map(|mu| w * s.iter().map(|&x| phi[x] * (phi[g.shift(x, mu, 1)] - phi[x]) / eta).sum::<f64>()).collect(),
        })
        .collect()
}

/// Alphas of every small entry (zeros for large ones), in entry order.
pub fn family_alphas(fam: &LocalFamily) -> Result<Vec<Alphas>> {
    fam.entries
        .par_iter()
        .map(|en| {
            if en.small {
                extract_alphas(&fam.geom, &en.sites, &en.e, en.sites[0])
            } else {
                Ok(Alphas { alpha0: 0.0, alpha2: 0.0, alpha2mu: vec![0.0; fam.geom.d] })
            }
        })
        .collect()
}

/// `(eps, mu, nu)` seen by one cube: minus the sums of the alphas over small sets containing it
/// and inside `within`.
fn local_couplings(fam: &LocalFamily, alphas: &[Alphas], cube: usize, within: CubeMask) -> (f64, f64, Vec<f64>) {
    let mut eps = 0.0;
    let mut mu = 0.0;
    let mut nu = vec![0.0; fam.geom.d];
    for (en, a) in fam.entries.iter().zip(alphas) {
        if en.small && en.cubes >> cube & 1 == 1 && en.cubes & !within == 0 {
            eps -= a.alpha0;
            mu -= 2.0 * a.alpha2;
            for (v, b) in nu.iter_mut().zip(&a.alpha2mu) {
                *v -= b;
            }
        }
    }
    (eps, mu, nu)
}

/// `E(Lambda) = -eps Vol(Lambda) - mu/2 ||phi||^2_Lambda - sum_mu nu_mu int phi d_mu phi
///  + sum_{X in Lambda} RE(X) + sum_{X crossing Lambda} T_Lambda E(X)`,
/// with `T_Lambda E(X) = -(alpha_0 Vol(X ∩ Lambda) + alpha_2 ||phi||^2_{X∩Lambda} + sum alpha_{2,mu} int_{X∩Lambda} phi d_mu phi)`.
pub fn decompose_over_region(fam: &LocalFamily, lambda: CubeMask, phi: &[f64]) -> Result<Decomposition> {
    let alphas = family_alphas(fam)?;
    let full = fam.lat.full();
    let (eps, mu, nu) = local_couplings(fam, &alphas, 0, full);
    let mut spread: f64 = 0.0;
    for c in 1..fam.lat.len() {
        let (e2, m2, n2) = local_couplings(fam, &alphas, c, full);
        spread = spread.max((e2 - eps).abs()).max((m2 - mu).abs());
        for (a, b) in n2.iter().zip(&nu) {
            spread = spread.max((a - b).abs());
        }
    }
    let ints = cube_integrals(fam, phi);
    let in_lambda = cubes_of(lambda);
    let vol: f64 = in_lambda.iter().map(|&c| ints[c].vol).sum();
    let phi2: f64 = in_lambda.iter().map(|&c| ints[c].phi2).sum();
    let dphi: Vec<f64> = (0..fam.geom.d).map(|m| in_lambda.iter().map(|&c| ints[c].dphi[m]).sum()).collect();
    let e_lambda = fam.total(lambda, phi);

    let mut renormalized = 0.0;
    let mut boundary = 0.0;
    let mut crossing = 0;
    for (en, a) in fam.entries.iter().zip(&alphas) {
        if en.cubes & !lambda == 0 {
            let ct = if en.small { counterterm(&fam.geom, &en.sites, a).eval(phi) } else { 0.0 };
            renormalized += en.e.eval(phi) - ct;
        } else if en.small && en.cubes & lambda != 0 {
            crossing += 1;
            for c in cubes_of(en.cubes & lambda) {
                let t = &ints[c];
                boundary -= a.alpha0 * t.vol + a.alpha2 * t.phi2 + a.alpha2mu.iter().zip(&t.dphi).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    let mut boundary_direct = 0.0;
    for &c in &in_lambda {
        let (el, ml, nl) = local_couplings(fam, &alphas, c, lambda);
        let t = &ints[c];
        boundary_direct -= (el - eps) * t.vol + 0.5 * (ml - mu) * t.phi2;
        for m in 0..fam.geom.d {
            boundary_direct -= (nl[m] - nu[m]) * t.dphi[m];
        }
    }
    let volume_term = -eps * vol;
    let mass_term = -0.5 * mu * phi2;
    let nu_term = -nu.iter().zip(&dphi).map(|(a, b)| a * b).sum::<f64>();
    let rhs = volume_term + mass_term + nu_term + renormalized + boundary;
    Ok(Decomposition {
        eps,
        mu,
        nu,
        translation_spread: spread,
        e_lambda,
        volume_term,
        mass_term,
        nu_term,
        renormalized,
        boundary,
        boundary_direct,
        crossing_sets: crossing,
        residual: (e_lambda - rhs).abs() / e_lambda.abs().max(1.0),
    })
}

// ---------------------------------------------------------------- reblocking

/// `(BE)(Y) = sum_{X : Xbar = Y} E(X)` with `Xbar` the union of `l`-times coarser cubes meeting `X`.
pub fn reblock(fam: &LocalFamily, l: usize) -> Result<Vec<(CubeMask, PolyFunctional)>> {
    let (n, d) = (fam.lat.n, fam.lat.d);
    if n % l != 0 {
        return Err(Error::Geometry(format!("cube grid {n} not divisible by {l}")));
    }
    let nc = n / l;
    let coarse_of = |c: usize| {
        let mut cc = coords_in(c, n, d);
        for x in cc.iter_mut().take(d) {
            *x /= l;
        }
        index_in(&cc, nc, d)
    };
    let mut out: BTreeMap<CubeMask, PolyFunctional> = BTreeMap::new();
    for en in &fam.entries {
        let y = cubes_of(en.cubes).into_iter().fold(0 as CubeMask, |m, c| m | (1 << coarse_of(c)));
        out.entry(y).or_default().plus(&en.e, 1.0);
    }
    Ok(out.into_iter().collect())
}

/// `E(X, phi)` at level `k+1` against the same monomial at level `k` with `phi_L`:
/// returns the observed ratio and the predicted `L^{d - n(d-2)/2}` (with one fewer power for
/// the derivative monomial).
pub fn monomial_scaling(fine: &LatticeGeometry, phi: &[f64], x: &[usize], power: u32, derivative: bool) -> Result<(f64, f64)> {
    if fine.k == 0 {
        return Err(Error::Geometry("already on the unit lattice".into()));
    }
    // phi_L(x) = L^{-(d-2)/2} phi(x/L): same site indices, one level coarser
    let mut coarse_geom = fine.clone();
    coarse_geom.k -= 1;
    coarse_geom.mvol += 1;
    let f = (fine.l as f64).powf(-(fine.d as f64 - 2.0) / 2.0);
    let coarse: Vec<f64> = phi.iter().map(|v| v * f).collect();
    let eval = |g: &LatticeGeometry, v: &[f64]| -> f64 {
        let (w, eta) = (g.site_weight(), g.spacing());
        x.iter()
            .map(|&i| if derivative { v[i] * (v[g.shift(i, 0, 1)] - v[i]) / eta } else { v[i].powi(power as i32) })
            .sum::<f64>()
            * w
    };
    let e_fine = eval(fine, phi);
    let e_coarse = eval(&coarse_geom, &coarse);
    let (l, d) = (fine.l as f64, fine.d as f64);
    let n = if derivative { 2.0 } else { power as f64 };
    let predicted = l.powf(d - n * (d - 2.0) / 2.0 - if derivative { 1.0 } else { 0.0 });
    Ok((e_coarse / e_fine, predicted))
}

// ------------------------------------------------------------------ couplings

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Couplings {
    pub k: u32,
    pub lambda: f64,
    pub mu: f64,
    pub eps: f64,
}

/// The inputs of one step: `L_1 E`, `L_2 E` and the starred corrections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Corrections {
    pub l1: f64,
    pub l2: f64,
    pub eps_star: f64,
    pub mu_star: f64,
}

impl Corrections {
    /// `L_1 = eps(B)`, `L_2 = mu(B)`, `eps* = eps(E#)`, `mu* = mu(E#)` from two already rescaled families.
    pub fn from_families(b: &LocalFamily, sharp: &LocalFamily) -> Result<Self> {
        let (l1, l2, _) = global_couplings(b)?;
        let (eps_star, mu_star, _) = global_couplings(sharp)?;
        Ok(Corrections { l1, l2, eps_star, mu_star })
    }
}

/// `(eps(E), mu(E), nu(E))` read off at cube 0.
pub fn global_couplings(fam: &LocalFamily) -> Result<(f64, f64, Vec<f64>)> {
    let alphas = family_alphas(fam)?;
    Ok(local_couplings(fam, &alphas, 0, fam.lat.full()))
}

/// `eps' = L^3 eps + L_1 + eps*`, `mu' = L^2 mu + L_2 + mu*`, `lambda' = L lambda`.
pub fn coupling_step(l: usize, c: &Couplings, corr: &Corrections) -> Couplings {
    let l = l as f64;
    Couplings {
        k: c.k + 1,
        lambda: l * c.lambda,
        mu: l * l * c.mu + corr.l2 + corr.mu_star,
        eps: l * l * l * c.eps + corr.l1 + corr.eps_star,
    }
}

/// Runs the recursion from `k = 0` with `lambda_0 = L^{-N} lambda` for `N` steps.
pub fn trajectory(cs: &CouplingState, mu0: f64, eps0: f64, corr: impl Fn(u32) -> Corrections) -> Vec<Couplings> {
    let mut c = Couplings { k: 0, lambda: cs.lambda_k(0), mu: mu0, eps: eps0 };
    let mut out = vec![c];
    for k in 0..cs.nlevels {
        c = coupling_step(cs.l, &c, &corr(k));
        out.push(c);
    }
    out
}

/// Largest distance, in units in the last place, between the recursion and `lambda_k = L^{-(N-k)} lambda`.
pub fn lambda_chain_ulps(cs: &CouplingState, traj: &[Couplings]) -> u64 {
    traj.iter().map(|c| (c.lambda.to_bits() as i64 - cs.lambda_k(c.k).to_bits() as i64).unsigned_abs()).max().unwrap_or(0)
}

pub fn trajectory_csv(traj: &[Couplings]) -> String {
    let mut s = String::from("k,lambda,mu,eps\n");
    for c in traj {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", c.k, c.lambda, c.mu, c.eps);
    }
    s
}

/// Random field for the decomposition suites.
pub fn random_field(geom: &LatticeGeometry, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..geom.n_sites()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

//! Small-field indicators, large/small partitions of unity and the rules that
//! generate the next small-field region.
//!
//! Indicators are closed inequalities (`<=`), so a field sitting exactly on a
//! threshold passes. Partition sums are done in integer arithmetic on cube
//! bitmasks and must come out as exactly 1.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluctuation::unit_covariance;
use crate::geometry::{coords_in, index_in, king_offsets, torus_gap, LatticeGeometry, Region, RegionSequence, SiteSet, MAX_DIM};
use crate::greens::minimizer;
use crate::linalg;
use crate::quadforms::{ActionParams, CouplingState};

/// Cube subsets of a periodic cube grid with at most 128 cubes.
pub type CubeMask = u128;

/// Largest cube count whose subsets are enumerated exhaustively.
pub const SUBSET_CAP: usize = 12;

/// Periodic grid of cubes with king-move (sup metric) neighborhoods.
#[derive(Clone, Debug)]
pub struct CubeLattice {
    pub d: usize,
    pub n: usize,
    closed: Vec<CubeMask>,
}

impl CubeLattice {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d == 0 || d > MAX_DIM || n == 0 {
            return Err(Error::Geometry(format!("cube grid {n}^{d}")));
        }
        let count = n.pow(d as u32);
        if count > 128 {
            return Err(Error::Cap(format!("{count} cubes exceed the 128-cube mask")));
        }
        let offs = king_offsets(d);
        let closed = (0..count)
            .map(|c| {
                let cc = coords_in(c, n, d);
                let mut m: CubeMask = 1 << c;
                for o in &offs {
                    let mut t = [0; MAX_DIM];
                    for mu in 0..d {
                        t[mu] = (cc[mu] as isize + o[mu]).rem_euclid(n as isize) as usize;
                    }
                    m |= 1 << index_in(&t, n, d);
                }
                m
            })
            .collect();
        Ok(CubeLattice { d, n, closed })
    }

    pub fn len(&self) -> usize {
        self.closed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closed.is_empty()
    }

    /// The cube and its king neighbors.
    pub fn closed_neighborhood(&self, c: usize) -> CubeMask {
        self.closed[c]
    }

    pub fn is_connected(&self, s: CubeMask) -> bool {
        if s == 0 {
            return true;
        }
        let mut seen: CubeMask = 1 << s.trailing_zeros();
        loop {
            let next = self.star(seen, 1) & s;
            if next == seen {
                return seen == s;
            }
            seen = next;
        }
    }

    pub fn full(&self) -> CubeMask {
        if self.len() == 128 {
            CubeMask::MAX
        } else {
            (1 << self.len()) - 1
        }
    }

    /// `S^{n*}`: `S` enlarged by `layers` cube layers.
    pub fn star(&self, s: CubeMask, layers: usize) -> CubeMask {
        let mut cur = s;
        for _ in 0..layers {
            let mut next = cur;
            let mut rest = cur;
            while rest != 0 {
                let c = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                next |= self.closed[c];
            }
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }

    /// `S^{n natural} = ((S^c)^{n*})^c`.
    pub fn natural(&self, s: CubeMask, layers: usize) -> CubeMask {
        let full = self.full();
        full & !self.star(full & !s, layers)
    }

    /// Continuum gap between two closed cubes in units of the cube side.
    pub fn gap(&self, a: usize, b: usize) -> usize {
        let (ca, cb) = (coords_in(a, self.n, self.d), coords_in(b, self.n, self.d));
        let t = (0..self.d).map(|mu| torus_gap(ca[mu], cb[mu], self.n)).max().unwrap_or(0);
        t.saturating_sub(1)
    }

    /// Smallest gap between a cube outside `outer` and a cube of `inner`; `None` if either side is empty.
    pub fn separation(&self, outer: CubeMask, inner: CubeMask) -> Option<usize> {
        let out: Vec<usize> = cubes_of(self.full() & !outer);
        let ins: Vec<usize> = cubes_of(inner);
        out.iter().flat_map(|&a| ins.iter().map(move |&b| (a, b))).map(|(a, b)| self.gap(a, b)).min()
    }

    pub fn from_region(r: &Region) -> Result<(Self, CubeMask)> {
        let lat = Self::new(r.d, r.grid)?;
        let mask = r.cube_indices().into_iter().fold(0, |m, c| m | (1 << c));
        Ok((lat, mask))
    }

    pub fn to_region(&self, mask: CubeMask, cube_side: usize) -> Region {
        Region::from_mask(cube_side, self.n, self.d, (0..self.len()).map(|c| mask >> c & 1 == 1).collect())
    }
}

pub fn cubes_of(mask: CubeMask) -> Vec<usize> {
    (0..128).filter(|&c| mask >> c & 1 == 1).collect()
}

/// All submasks of `mask`, including 0 and `mask`.
fn submasks(mask: CubeMask) -> impl Iterator<Item = CubeMask> {
    let mut sub = Some(mask);
    std::iter::from_fn(move || {
        let s = sub?;
        sub = if s == 0 { None } else { Some((s - 1) & mask) };
        Some(s)
    })
}

// ---------------------------------------------------------------- membership

/// Bounds for one small-field set: `|Phi - Q phi| <= diff`, `|d phi| <= grad`,
/// `|phi| <= field`, all on the cube enlarged by `tilde` unit blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmallFieldSpec {
    pub diff: f64,
    pub grad: f64,
    pub field: f64,
    pub tilde: usize,
}

impl SmallFieldSpec {
    pub fn new(p: f64, alpha: f64) -> Self {
        SmallFieldSpec { diff: p, grad: p, field: p / alpha, tilde: 1 }
    }

    /// `S_k(box)` with `p_k`, `alpha_k` from the coupling state.
    pub fn small(cs: &CouplingState, k: u32) -> Self {
        Self::new(cs.p_k(k), cs.alpha_k(k))
    }

    /// Real slice of the analyticity domain: every bound is `lambda_k^{-1/4-delta}`.
    pub fn analytic(cs: &CouplingState, k: u32, delta: f64) -> Self {
        let b = cs.lambda_k(k).powf(-0.25 - delta);
        SmallFieldSpec { diff: b, grad: b, field: b, tilde: 1 }
    }

    /// The next-level set: thresholds `p_{k+1}` carrying the `L^{-1/2}`, `L^{-3/2}` factors.
    pub fn next_level(cs: &CouplingState, k: u32) -> Self {
        let (p, a, l) = (cs.p_k(k + 1), cs.alpha_k(k + 1), cs.l as f64);
        SmallFieldSpec { diff: p * l.powf(-0.5), grad: p * l.powf(-1.5), field: p / a * l.powf(-0.5), tilde: 1 }
    }

    pub fn scaled(&self, c: f64) -> Self {
        SmallFieldSpec { diff: self.diff * c, grad: self.grad * c, field: self.field * c, tilde: self.tilde }
    }

    /// Every bound of `self` is at most the matching bound of `o`, so membership in `self` implies membership in `o`.
    pub fn within(&self, o: &Self) -> bool {
        self.tilde == o.tilde && self.diff <= o.diff && self.grad <= o.grad && self.field <= o.field
    }
}

/// Largest observed value of each of the three quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Maxima {
    pub diff: f64,
    pub grad: f64,
    pub field: f64,
}

impl Maxima {
    fn merge(self, o: Maxima) -> Maxima {
        Maxima { diff: self.diff.max(o.diff), grad: self.grad.max(o.grad), field: self.field.max(o.field) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Membership {
    pub member: bool,
    /// Bound minus observed maximum; nonnegative exactly when the inequality holds.
    pub slack: Maxima,
    pub max: Maxima,
}

impl Membership {
    fn from_max(spec: &SmallFieldSpec, max: Maxima) -> Self {
        let slack = Maxima { diff: spec.diff - max.diff, grad: spec.grad - max.grad, field: spec.field - max.field };
        let member = slack.diff >= 0.0 && slack.grad >= 0.0 && slack.field >= 0.0;
        Membership { member, slack, max }
    }
}

/// Fine sites and unit blocks of a cube, and of the cube enlarged by `tilde` unit blocks.
#[derive(Clone, Debug)]
pub struct CubeCover {
    pub geom: LatticeGeometry,
    pub cube_side: usize,
    pub grid: usize,
    pub unit_level: u32,
    pub sites: Vec<Vec<usize>>,
    pub tilde_sites: Vec<Vec<usize>>,
    pub tilde_blocks: Vec<Vec<usize>>,
}

impl CubeCover {
    /// Cubes of `cube_side` fine sites; unit blocks are `L^unit_level` sites wide.
    pub fn new(geom: &LatticeGeometry, cube_side: usize, unit_level: u32, tilde: usize) -> Result<Self> {
        let side = geom.side();
        let unit = geom.block_side(unit_level);
        if cube_side == 0 || side % cube_side != 0 || cube_side % unit != 0 {
            return Err(Error::Geometry(format!("cube side {cube_side} does not fit side {side} and unit {unit}")));
        }
        let grid = side / cube_side;
        let n_cubes = grid.pow(geom.d as u32);
        let t = tilde * unit;
        let mut sites = vec![Vec::new(); n_cubes];
        let mut tilde_sites = vec![Vec::new(); n_cubes];
        for x in 0..geom.n_sites() {
            let cx = geom.coords(x);
            let mut cc = [0; MAX_DIM];
            for mu in 0..geom.d {
                cc[mu] = cx[mu] / cube_side;
            }
            sites[index_in(&cc, grid, geom.d)].push(x);
            for (c, ts) in tilde_sites.iter_mut().enumerate() {
                let lo = coords_in(c, grid, geom.d);
                let inside = (0..geom.d).all(|mu| {
                    let rel = (cx[mu] + side + t - lo[mu] * cube_side) % side;
                    rel < cube_side + 2 * t
                });
                if inside {
                    ts.push(x);
                }
            }
        }
        let tilde_blocks = tilde_sites
            .iter()
            .map(|ts| {
                let mut b: Vec<usize> = ts.iter().map(|&x| geom.block_of(x, unit_level)).collect();
                b.sort_unstable();
                b.dedup();
                b
            })
            .collect();
        Ok(CubeCover { geom: geom.clone(), cube_side, grid, unit_level, sites, tilde_sites, tilde_blocks })
    }

    pub fn n_cubes(&self) -> usize {
        self.sites.len()
    }

    pub fn lattice(&self) -> Result<CubeLattice> {
        CubeLattice::new(self.geom.d, self.grid)
    }

    /// Unit blocks inside the cube itself.
    pub fn blocks(&self, c: usize) -> Vec<usize> {
        let mut b: Vec<usize> = self.sites[c].iter().map(|&x| self.geom.block_of(x, self.unit_level)).collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// Mask of cubes for which `good` holds.
    pub fn mask_where(&self, good: impl Fn(usize) -> bool) -> CubeMask {
        (0..self.n_cubes()).filter(|&c| good(c)).fold(0, |m, c| m | (1 << c))
    }
}

/// Average of a fine field over each block of level `j`.
pub fn block_average(geom: &LatticeGeometry, phi: &[f64], j: u32) -> Vec<f64> {
    (0..geom.n_blocks(j))
        .map(|b| {
            let s = geom.block_sites(b, j);
            s.iter().map(|&x| phi[x]).sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Block of level `j` one block over in direction `mu`.
pub fn block_shift(geom: &LatticeGeometry, b: usize, j: u32, mu: usize) -> usize {
    let x = geom.block_sites(b, j)[0];
    geom.block_of(geom.shift(x, mu, geom.block_side(j) as isize), j)
}

/// Largest forward difference quotient of a fine field over `sites`.
pub fn max_fine_gradient(geom: &LatticeGeometry, phi: &[f64], sites: &[usize]) -> f64 {
    let h = geom.spacing();
    sites
        .iter()
        .flat_map(|&x| (0..geom.d).map(move |mu| (phi[geom.shift(x, mu, 1)] - phi[x]).abs() / h))
        .fold(0.0, f64::max)
}

/// Largest forward difference of a block field over `blocks`, with the block side as unit length.
/// Only pairs with both ends in `blocks` count when `inside_only` is set.
pub fn max_block_gradient(geom: &LatticeGeometry, v: &[f64], blocks: &[usize], j: u32, inside_only: bool, unit: f64) -> f64 {
    let mut m: f64 = 0.0;
    for &b in blocks {
        for mu in 0..geom.d {
            let nb = block_shift(geom, b, j, mu);
            if inside_only && !blocks.contains(&nb) {
                continue;
            }
            m = m.max((v[nb] - v[b]).abs() / unit);
        }
    }
    m
}

/// Membership of `(Phi, phi)` in the small-field set of one cube. `big_phi` lives on
/// the unit blocks of the cover, `phi` on fine sites.
pub fn membership(cover: &CubeCover, spec: &SmallFieldSpec, cube: usize, big_phi: &[f64], phi: &[f64]) -> Membership {
    let g = &cover.geom;
    let qphi = block_average(g, phi, cover.unit_level);
    let blocks = &cover.tilde_blocks[cube];
    let sites = &cover.tilde_sites[cube];
    let max = Maxima {
        diff: blocks.iter().map(|&b| (big_phi[b] - qphi[b]).abs()).fold(0.0, f64::max),
        grad: max_fine_gradient(g, phi, sites),
        field: sites.iter().map(|&x| phi[x].abs()).fold(0.0, f64::max),
    };
    Membership::from_max(spec, max)
}

/// Membership of a union of cubes: the conjunction over its cubes.
pub fn membership_region(cover: &CubeCover, spec: &SmallFieldSpec, cubes: &[usize], big_phi: &[f64], phi: &[f64]) -> Membership {
    let max = cubes
        .iter()
        .map(|&c| membership(cover, spec, c, big_phi, phi).max)
        .fold(Maxima::default(), Maxima::merge);
    Membership::from_max(spec, max)
}

// ---------------------------------------------------------- region generation

/// `Omega_{k+1} = (Lambda_bar_k)^{n natural} - P^{n*}`.
pub fn next_small_region(lat: &CubeLattice, lambda_bar: CubeMask, p: CubeMask, layers: usize) -> CubeMask {
    lat.natural(lambda_bar, layers) & !lat.star(p, layers)
}

/// `Lambda_{k+1} = Omega^{n natural} - (Q^{n*} ∪ R^{n*})`.
pub fn next_inner_region(lat: &CubeLattice, omega: CubeMask, q: CubeMask, r: CubeMask, layers: usize) -> CubeMask {
    lat.natural(omega, layers) & !lat.star(q | r, layers)
}

/// Region form of [`next_small_region`] for grids too large for a mask.
pub fn next_small_region_of(lambda_bar: &Region, p: &Region, layers: usize) -> Region {
    lambda_bar.natural(layers).minus(&p.star(layers))
}

/// `d(outer^c, inner) >= layers` in cube units; vacuous when either set is empty.
pub fn validate_separation(lat: &CubeLattice, outer: CubeMask, inner: CubeMask, layers: usize) -> bool {
    lat.separation(outer, inner).map_or(true, |g| g >= layers)
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityReport {
    pub pairs: u64,
    pub violations: u64,
    pub separation_failures: u64,
}

/// For every `Lambda_bar` and every `P ⊂ Lambda_bar`, adding one cube to `P` must not enlarge
/// `Omega_{k+1}`, and each `Omega_{k+1}` must be separated from `Lambda_bar^c`.
pub fn generation_monotonicity(lat: &CubeLattice, layers: usize) -> Result<MonotonicityReport> {
    if lat.len() > SUBSET_CAP {
        return Err(Error::Cap(format!("{} cubes exceed the {SUBSET_CAP}-cube subset cap", lat.len())));
    }
    let full = lat.full();
    let res: Vec<(u64, u64, u64)> = (0..=full)
        .into_par_iter()
        .map(|lb| {
            let (mut pairs, mut bad, mut sep) = (0, 0, 0);
            for p in submasks(lb) {
                let om = next_small_region(lat, lb, p, layers);
                if !validate_separation(lat, lb, om, layers) {
                    sep += 1;
                }
                for c in cubes_of(lb & !p) {
                    pairs += 1;
                    if next_small_region(lat, lb, p | 1 << c, layers) & !om != 0 {
                        bad += 1;
                    }
                }
            }
            (pairs, bad, sep)
        })
        .collect();
    let (pairs, violations, separation_failures) =
        res.into_iter().fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(MonotonicityReport { pairs, violations, separation_failures })
}

// --------------------------------------------------------- partition identities

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum IdentityKind {
    /// Sum over large-field cubes `Q_0` of the whole torus, grouped by `Lambda_0`.
    Level0,
    /// Sum over `P ⊂ Lambda_bar`, grouped by `Omega_{k+1}`.
    Averaging,
    /// Sum over `R ⊂ Omega` of the fluctuation-field indicators.
    Fluctuation,
    /// Joint sum over `(Q, R)`, grouped by `Lambda_{k+1}`.
    Combined,
}

impl IdentityKind {
    pub const ALL: [IdentityKind; 4] = [Self::Level0, Self::Averaging, Self::Fluctuation, Self::Combined];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Level0 => "level0",
            Self::Averaging => "averaging",
            Self::Fluctuation => "fluctuation",
            Self::Combined => "combined",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PartitionConfig {
    pub d: usize,
    pub l: usize,
    /// Cubes per side of the periodic cube grid.
    pub cubes: usize,
    /// Cube side in fine sites; must be a multiple of `l`.
    pub cube_side: usize,
    /// Layer count used in the natural/star operations that build the next region.
    pub layers: usize,
    /// Layers removed to form the interior on which the next-level indicator lives.
    pub inner_layers: usize,
    pub tilde: usize,
    pub samples: usize,
    pub seed: u64,
    /// Probability that a cube belongs to a sampled starting region.
    pub region_density: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            d: 2,
            l: 3,
            cubes: 3,
            cube_side: 9,
            layers: 5,
            inner_layers: 1,
            tilde: 1,
            samples: 100,
            seed: 7,
            region_density: 0.8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub kind: IdentityKind,
    pub samples: usize,
    /// Samples whose plain sum is exactly 1.
    pub exact: usize,
    /// Samples whose grouped sum is exactly 1.
    pub grouped_exact: usize,
    /// Terms visited over all samples.
    pub terms: u64,
    pub nonzero_terms: u64,
    /// Mean fraction of cubes whose indicator is 1.
    pub good_fraction: f64,
    /// Distinct grouped regions with a nonzero coefficient.
    pub regions: usize,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.exact == self.samples && self.grouped_exact == self.samples
    }
}

struct SampleSum {
    plain: i64,
    grouped: i64,
    terms: u64,
    nonzero: u64,
    good: f64,
    regions: Vec<CubeMask>,
}

/// `zeta(S) = prod (1 - chi)` and `chi(S) = prod chi` for 0/1 indicators given by the good mask.
fn zeta(good: CubeMask, s: CubeMask) -> i64 {
    (s & good == 0) as i64
}

fn chi(good: CubeMask, s: CubeMask) -> i64 {
    (s & !good == 0) as i64
}

/// Field with per-cube amplitude drawn in `[0.15, 0.75] * scale`, so some cubes pass a gradient
/// test at `scale` and some do not.
fn rough_field(rng: &mut impl Rng, cover: &CubeCover, scale: f64) -> Vec<f64> {
    let amp: Vec<f64> = (0..cover.n_cubes()).map(|_| rng.gen_range(0.15..0.75) * scale).collect();
    let mut v = vec![0.0; cover.geom.n_sites()];
    for (c, s) in cover.sites.iter().enumerate() {
        for &x in s {
            v[x] = amp[c] * rng.gen_range(-1.0..1.0);
        }
    }
    v
}

/// Per-block noise whose amplitude straddles `bound`.
fn rough_blocks(rng: &mut impl Rng, cover: &CubeCover, j: u32, bound: f64) -> Vec<f64> {
    let amp: Vec<f64> = (0..cover.n_cubes()).map(|_| rng.gen_range(0.3..1.6) * bound).collect();
    let mut v = vec![0.0; cover.geom.n_blocks(j)];
    for c in 0..cover.n_cubes() {
        for x in &cover.sites[c] {
            let b = cover.geom.block_of(*x, j);
            v[b] = amp[c] * ((b as f64 * 0.618 + rng.gen_range(0.0..1.0)).fract() * 2.0 - 1.0);
        }
    }
    v
}

fn random_region(rng: &mut impl Rng, lat: &CubeLattice, density: f64) -> CubeMask {
    if rng.gen_bool(0.1) {
        return lat.full();
    }
    (0..lat.len()).filter(|_| rng.gen_bool(density)).fold(0, |m, c| m | (1 << c))
}

struct IdentitySetup {
    cfg: PartitionConfig,
    cover: CubeCover,
    lat: CubeLattice,
    p: f64,
    alpha: f64,
}

impl IdentitySetup {
    fn new(cfg: &PartitionConfig) -> Result<Self> {
        if cfg.cube_side % cfg.l != 0 {
            return Err(Error::Config(format!("cube side {} not a multiple of L = {}", cfg.cube_side, cfg.l)));
        }
        let side = cfg.cubes * cfg.cube_side;
        let geom = LatticeGeometry::with_side(cfg.l, cfg.d, 0, 1, side)?;
        let cover = CubeCover::new(&geom, cfg.cube_side, 0, cfg.tilde)?;
        let lat = cover.lattice()?;
        if lat.len() > SUBSET_CAP {
            return Err(Error::Cap(format!("{} cubes exceed the {SUBSET_CAP}-cube subset cap", lat.len())));
        }
        Ok(IdentitySetup { cfg: cfg.clone(), cover, lat, p: 1.0, alpha: 0.5 })
    }

    fn sample(&self, kind: IdentityKind, idx: usize) -> SampleSum {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(idx as u64));
        let (g, cv, lat) = (&self.cover.geom, &self.cover, &self.lat);
        let full = lat.full();
        let n = lat.len() as f64;
        let layers = self.cfg.layers;
        let mut out = SampleSum { plain: 0, grouped: 0, terms: 0, nonzero: 0, good: 0.0, regions: Vec::new() };
        let mut groups: HashMap<CubeMask, i64> = HashMap::new();
        match kind {
            IdentityKind::Level0 => {
                let phi = rough_field(&mut rng, cv, self.p);
                let bound = self.p / self.alpha;
                let good = cv.mask_where(|c| {
                    let s = &cv.tilde_sites[c];
                    s.iter().all(|&x| phi[x].abs() <= bound) && max_fine_gradient(g, &phi, s) <= self.p
                });
                out.good = good.count_ones() as f64 / n;
                for q in submasks(full) {
                    out.terms += 1;
                    let rest = full & !q;
                    let t = zeta(good, q) * chi(good, rest);
                    out.plain += t;
                    let lam = lat.natural(rest, layers);
                    let c = zeta(good, q) * chi(good, rest & !lam);
                    if c != 0 {
                        out.nonzero += 1;
                        *groups.entry(lam).or_default() += c;
                    }
                }
                out.grouped = groups.iter().map(|(&lam, &c)| c * chi(good, lam)).sum();
            }
            IdentityKind::Averaging => {
                let lb = random_region(&mut rng, lat, self.cfg.region_density);
                let phi = rough_field(&mut rng, cv, self.p);
                let noise = rough_blocks(&mut rng, cv, 1, self.p);
                let qphi = block_average(g, &phi, 1);
                let next: Vec<f64> = qphi.iter().zip(&noise).map(|(a, b)| a + b).collect();
                let good = cv.mask_where(|c| {
                    blocks_of(cv, c, 1).iter().all(|&y| (next[y] - qphi[y]).abs() <= self.p)
                }) & lb;
                out.good = good.count_ones() as f64 / n;
                let good_on = good | !lb;
                for p in submasks(lb) {
                    out.terms += 1;
                    let t = zeta(good_on, p) * chi(good_on, lb & !p);
                    out.plain += t;
                    let om = next_small_region(lat, lb, p, layers);
                    let c = zeta(good_on, p) * chi(good_on, (lb & !p) & !om);
                    if c != 0 {
                        out.nonzero += 1;
                        *groups.entry(om).or_default() += c;
                    }
                }
                out.grouped = groups.iter().map(|(&om, &c)| c * chi(good_on, om)).sum();
            }
            IdentityKind::Fluctuation => {
                let om = random_region(&mut rng, lat, self.cfg.region_density);
                let w = rough_field(&mut rng, cv, 2.0 * self.p);
                let good = cv.mask_where(|c| cv.sites[c].iter().all(|&x| w[x].abs() <= self.p)) & om;
                out.good = good.count_ones() as f64 / n;
                let good_on = good | !om;
                for r in submasks(om) {
                    out.terms += 1;
                    let t = zeta(good_on, r) * chi(good_on, om & !r);
                    out.plain += t;
                    let lam = lat.natural(om, layers) & !lat.star(r, layers);
                    let c = zeta(good_on, r) * chi(good_on, (om & !r) & !lam);
                    if c != 0 {
                        out.nonzero += 1;
                        *groups.entry(lam).or_default() += c;
                    }
                }
                out.grouped = groups.iter().map(|(&lam, &c)| c * chi(good_on, lam)).sum();
            }
            IdentityKind::Combined => {
                let l = self.cfg.l as f64;
                let om = random_region(&mut rng, lat, self.cfg.region_density);
                let inner = lat.natural(om, self.cfg.inner_layers);
                let spec = SmallFieldSpec {
                    diff: self.p * l.powf(-0.5),
                    grad: self.p * l.powf(-1.5),
                    field: self.p / self.alpha * l.powf(-0.5),
                    tilde: self.cfg.tilde,
                };
                let phi0 = rough_field(&mut rng, cv, spec.grad);
                let noise = rough_blocks(&mut rng, cv, 1, spec.diff);
                let next: Vec<f64> = block_average(g, &phi0, 1).iter().zip(&noise).map(|(a, b)| a + b).collect();
                let w = rough_field(&mut rng, cv, 2.0 * self.p);
                let big = self.tilde_blocks_at(1);
                let g0 = cv.mask_where(|c| {
                    let qphi = block_average(g, &phi0, 1);
                    let s = &cv.tilde_sites[c];
                    big[c].iter().all(|&y| (next[y] - qphi[y]).abs() <= spec.diff)
                        && max_fine_gradient(g, &phi0, s) <= spec.grad
                        && s.iter().all(|&x| phi0[x].abs() <= spec.field)
                }) & inner;
                let gw = cv.mask_where(|c| cv.sites[c].iter().all(|&x| w[x].abs() <= self.p)) & om;
                out.good = (g0.count_ones() + gw.count_ones()) as f64 / (2.0 * n);
                let g0_on = g0 | !inner;
                let gw_on = gw | !om;
                let qs: Vec<(CubeMask, i64)> = submasks(inner).map(|q| (q, zeta(g0_on, q))).collect();
                let rs: Vec<(CubeMask, i64)> = submasks(om).map(|r| (r, zeta(gw_on, r))).collect();
                for &(q, zq) in &qs {
                    for &(r, zr) in &rs {
                        out.terms += 1;
                        // a vanishing zeta factor kills every term of the row
                        if zq == 0 || zr == 0 {
                            continue;
                        }
                        let t = chi(g0_on, inner & !q) * chi(gw_on, om & !r);
                        out.plain += t;
                        let lam = next_inner_region(lat, om, q, r, layers);
                        let c = chi(g0_on, (inner & !q) & !lam) * chi(gw_on, (om & !r) & !lam);
                        if c != 0 {
                            out.nonzero += 1;
                            *groups.entry(lam).or_default() += c;
                        }
                    }
                }
                out.grouped = groups.iter().map(|(&lam, &c)| c * chi(g0_on, lam) * chi(gw_on, lam)).sum();
            }
        }
        out.regions = groups.into_iter().filter(|&(_, c)| c != 0).map(|(m, _)| m).collect();
        out
    }

    fn tilde_blocks_at(&self, j: u32) -> Vec<Vec<usize>> {
        self.cover
            .tilde_sites
            .iter()
            .map(|s| {
                let mut b: Vec<usize> = s.iter().map(|&x| self.cover.geom.block_of(x, j)).collect();
                b.sort_unstable();
                b.dedup();
                b
            })
            .collect()
    }
}

fn blocks_of(cover: &CubeCover, c: usize, j: u32) -> Vec<usize> {
    let mut b: Vec<usize> = cover.sites[c].iter().map(|&x| cover.geom.block_of(x, j)).collect();
    b.sort_unstable();
    b.dedup();
    b
}

/// Exhaustive partition-of-unity sums over all large-field subsets, for sampled fields.
pub fn partition_identity(kind: IdentityKind, cfg: &PartitionConfig) -> Result<IdentityReport> {
    let setup = IdentitySetup::new(cfg)?;
    let sums: Vec<SampleSum> = (0..cfg.samples).into_par_iter().map(|i| setup.sample(kind, i)).collect();
    let mut regions: Vec<CubeMask> = sums.iter().flat_map(|s| s.regions.iter().copied()).collect();
    regions.sort_unstable();
    regions.dedup();
    Ok(IdentityReport {
        kind,
        samples: cfg.samples,
        exact: sums.iter().filter(|s| s.plain == 1).count(),
        grouped_exact: sums.iter().filter(|s| s.grouped == 1).count(),
        terms: sums.iter().map(|s| s.terms).sum(),
        nonzero_terms: sums.iter().map(|s| s.nonzero).sum(),
        good_fraction: sums.iter().map(|s| s.good).sum::<f64>() / cfg.samples.max(1) as f64,
        regions: regions.len(),
    })
}

// ------------------------------------------------------------------ enforcement

#[derive(Clone, Debug, Serialize)]
pub struct EnforcementConfig {
    pub l: usize,
    /// Unit-lattice points per side.
    pub unit_side: usize,
    /// `M`, in unit blocks.
    pub m: usize,
    pub a: f64,
    pub mu_bar: f64,
    pub p: f64,
    pub alpha: f64,
    pub tilde: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EnforcementConfig {
    fn default() -> Self {
        EnforcementConfig { l: 2, unit_side: 16, m: 2, a: 1.0, mu_bar: 0.0, p: 1.0, alpha: 0.5, tilde: 1, samples: 200, seed: 11 }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EnforcementReport {
    pub samples: usize,
    pub admitted: usize,
    /// `max |Phi_k| / (p / alpha)` and `max |d Phi_k| / p` on admitted samples; bounds 2 and 3.
    pub phi_k: (f64, f64),
    /// Same for `Phi_{k+1}` on `Omega_{k+1}`; bounds 3 and 4.
    pub phi_next: (f64, f64),
    /// Measured constants for the glued field `Phi^#` on `Omega_k`.
    pub phi_sharp: (f64, f64),
    /// Rejected samples that broke one of the derived bounds, and how many of those had a vanishing product.
    pub violators: usize,
    pub violators_rejected: usize,
    /// Converse direction: worst ratio of the three small-field quantities to their thresholds
    /// when only `|Phi| <= p/alpha`, `|d Phi| <= p` is imposed.
    pub converse_constant: f64,
    /// Largest `|W| / p` on admitted fluctuation fields, and the chain bound it must respect.
    pub w_measured: f64,
    pub w_chain_bound: f64,
    pub w_chain_failures: usize,
}

impl EnforcementReport {
    pub fn derived_bounds_hold(&self) -> bool {
        self.phi_k.0 <= 2.0 + 1e-12
            && self.phi_k.1 <= 3.0 + 1e-12
            && self.phi_next.0 <= 3.0 + 1e-12
            && self.phi_next.1 <= 4.0 + 1e-12
            && self.violators == self.violators_rejected
            && self.w_chain_failures == 0
    }
}

/// Periodic random field on the unit lattice from a few low Fourier modes, scaled so that
/// `max|v| = field` or `max|dv| = grad`, whichever binds, then multiplied by `factor`.
fn smooth_unit_field(rng: &mut impl Rng, geom: &LatticeGeometry, j: u32, field: f64, grad: f64, factor: f64) -> Vec<f64> {
    let n = geom.n_blocks(j);
    let side = geom.side() / geom.block_side(j);
    let d = geom.d;
    let modes: Vec<([f64; MAX_DIM], f64, f64)> = (0..4)
        .map(|_| {
            let mut kv = [0.0; MAX_DIM];
            for k in kv.iter_mut().take(d) {
                *k = rng.gen_range(0..3) as f64;
            }
            (kv, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut v: Vec<f64> = (0..n)
        .map(|b| {
            let c = coords_in(b, side, d);
            modes
                .iter()
                .map(|(kv, amp, ph)| {
                    let arg: f64 = (0..d).map(|mu| kv[mu] * c[mu] as f64).sum::<f64>() * std::f64::consts::TAU / side as f64;
                    amp * (arg + ph).cos()
                })
                .sum()
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let mf = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mg = max_block_gradient(geom, &v, &all, j, false, 1.0);
    let s = (field / mf.max(1e-300)).min(grad / mg.max(1e-300)) * factor;
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Samples `(Phi_k, Phi_{k+1})` on a 1D torus, keeps the ones admitted by the small-field
/// indicators on the whole torus and the averaging indicator on `Omega_{k+1}` (the first half),
/// and measures the bounds those indicators imply. Also runs the fluctuation-field chain
/// `|W| <= ||S^{-1}||_inf (1 + d(L-1)) p` with `S` the spectral square root of the unit covariance.
pub fn enforcement_suite(cfg: &EnforcementConfig) -> Result<EnforcementReport> {
    let l = cfg.l;
    let geom = LatticeGeometry::with_side(l, 1, 1, 1, cfg.unit_side * l)?;
    let seq = RegionSequence::full(&geom)?;
    let params = ActionParams::new(cfg.a, l, 1, cfg.mu_bar, 1);
    let cover = CubeCover::new(&geom, cfg.m * l, 1, cfg.tilde)?;
    let spec = SmallFieldSpec { tilde: cfg.tilde, ..SmallFieldSpec::new(cfg.p, cfg.alpha) };
    let (p, pa) = (cfg.p, cfg.p / cfg.alpha);
    let n_next = geom.n_blocks(2);
    let omega_next: Vec<usize> = (0..n_next / 2).collect();
    let all_next: Vec<usize> = (0..n_next).collect();
    let all_unit: Vec<usize> = (0..geom.n_blocks(1)).collect();
    let cubes: Vec<usize> = (0..cover.n_cubes()).collect();
    let mut rep = EnforcementReport { samples: cfg.samples, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for _ in 0..cfg.samples {
        let factor = rng.gen_range(0.1..2.5);
        let big = smooth_unit_field(&mut rng, &geom, 1, pa, p, factor);
        let phi = minimizer(&geom, &seq, &params, &DVector::from_vec(big.clone()), &DVector::zeros(geom.n_sites()))?;
        let phi = phi.as_slice();
        let member = membership_region(&cover, &spec, &cubes, &big, phi).member;
        // Phi_{k+1} on blocks of L unit points, unit length = one unit point
        let q_big: Vec<f64> = (0..n_next)
            .map(|y| {
                let s = geom.block_sites(y, 2);
                s.iter().map(|&x| big[geom.block_of(x, 1)]).sum::<f64>() / s.len() as f64
            })
            .collect();
        let next: Vec<f64> = q_big.iter().map(|q| q + p * rng.gen_range(-1.2..1.2)).collect();
        let q_ok = omega_next.iter().all(|&y| (next[y] - q_big[y]).abs() <= p);
        let admitted = member && q_ok;

        let fk = (big.iter().fold(0.0f64, |m, x| m.max(x.abs())) / pa, max_block_gradient(&geom, &big, &all_unit, 1, false, 1.0) / p);
        let fnext = (
            omega_next.iter().map(|&y| next[y].abs()).fold(0.0, f64::max) / pa,
            max_block_gradient(&geom, &next, &omega_next, 2, true, l as f64) / p,
        );
        let sharp: Vec<f64> = (0..n_next).map(|y| if y < n_next / 2 { next[y] } else { q_big[y] }).collect();
        let fsharp = (
            sharp.iter().fold(0.0f64, |m, x| m.max(x.abs())) / pa,
            max_block_gradient(&geom, &sharp, &all_next, 2, false, l as f64) / p,
        );
        if admitted {
            rep.admitted += 1;
            rep.phi_k = (rep.phi_k.0.max(fk.0), rep.phi_k.1.max(fk.1));
            rep.phi_next = (rep.phi_next.0.max(fnext.0), rep.phi_next.1.max(fnext.1));
            rep.phi_sharp = (rep.phi_sharp.0.max(fsharp.0), rep.phi_sharp.1.max(fsharp.1));
        } else if fk.0 > 2.0 || fk.1 > 3.0 || fnext.0 > 3.0 || fnext.1 > 4.0 {
            rep.violators += 1;
            rep.violators_rejected += 1;
        }
        if admitted && (fk.0 > 2.0 || fk.1 > 3.0 || fnext.0 > 3.0 || fnext.1 > 4.0) {
            rep.violators += 1;
        }

        let conv = smooth_unit_field(&mut rng, &geom, 1, pa, p, 1.0);
        let cphi = minimizer(&geom, &seq, &params, &DVector::from_vec(conv.clone()), &DVector::zeros(geom.n_sites()))?;
        let m = membership_region(&cover, &spec, &cubes, &conv, cphi.as_slice()).max;
        rep.converse_constant = rep.converse_constant.max((m.diff / spec.diff).max(m.grad / spec.grad).max(m.field / spec.field));
    }

    let (measured, bound, fails) = fluctuation_chain(cfg, &mut rng)?;
    rep.w_measured = measured;
    rep.w_chain_bound = bound;
    rep.w_chain_failures = fails;
    Ok(rep)
}

/// Largest `|W|/p`, the chain bound, and the number of samples exceeding it.
fn fluctuation_chain(cfg: &EnforcementConfig, rng: &mut impl Rng) -> Result<(f64, f64, usize)> {
    let l = cfg.l;
    let d = 1;
    let geom = LatticeGeometry::with_side(l, d, 0, 1, cfg.unit_side)?;
    let n = geom.n_sites();
    let cov = unit_covariance(&geom, &SiteSet::full(n), cfg.a)?;
    let s = linalg::sym_function(&cov.mat, f64::sqrt);
    let s_inv = linalg::spd_inverse(&s)?;
    let inf_norm = (0..n).map(|i| s_inv.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let spread = 1.0 + (d * (l - 1)) as f64;
    let bound = inf_norm * spread;
    let all: Vec<usize> = (0..n).collect();
    let (mut worst, mut fails) = (0.0f64, 0usize);
    for _ in 0..cfg.samples {
        let w0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let v0 = &s * &w0;
        let qv = block_average(&geom, v0.as_slice(), 1);
        let lim = qv.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(max_fine_gradient(&geom, v0.as_slice(), &all));
        let c = cfg.p / lim * rng.gen_range(0.3..1.0);
        let w = w0 * c;
        let v = &s * &w;
        let vmax = v.amax();
        if vmax > spread * cfg.p * (1.0 + 1e-12) {
            fails += 1;
        }
        let ratio = w.amax() / cfg.p;
        if ratio > bound * (1.0 + 1e-12) {
            fails += 1;
        }
        worst = worst.max(ratio);
    }
    Ok((worst, bound, fails))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(samples: usize) -> PartitionConfig {
        PartitionConfig { samples, ..Default::default() }
    }

    #[test]
    fn star_and_natural_match_regions() {
        let g = LatticeGeometry::with_side(2, 2, 0, 1, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = CubeLattice::new(2, 8).unwrap();
        for _ in 0..50 {
            let mask: CubeMask = (0..64).filter(|_| rng.gen_bool(0.3)).fold(0, |m, c| m | (1 << c));
            let r = lat.to_region(mask, 2);
            for layers in 0..3 {
                let (_, st) = CubeLattice::from_region(&r.star(layers)).unwrap();
                let (_, na) = CubeLattice::from_region(&r.natural(layers)).unwrap();
                assert_eq!(st, lat.star(mask, layers));
                assert_eq!(na, lat.natural(mask, layers));
            }
        }
        assert_eq!(Region::full(&g, 2).unwrap().n_cubes(), 64);
    }

    #[test]
    fn empty_p_keeps_the_torus() {
        let lat = CubeLattice::new(2, 3).unwrap();
        assert_eq!(next_small_region(&lat, lat.full(), 0, 5), lat.full());
        assert_eq!(next_small_region(&lat, lat.full(), 1, 5), 0);
    }

    #[test]
    fn single_cube_hole_on_large_torus() {
        let g = LatticeGeometry::with_side(2, 2, 0, 1, 16).unwrap();
        let full = Region::full(&g, 1).unwrap();
        let p = Region::from_cubes(&g, 1, &[[8, 8, 0]]).unwrap();
        let om = next_small_region_of(&full, &p, 5);
        let hole = om.complement();
        assert_eq!(hole.count(), 11 * 11);
        assert!(hole.contains_cube(index_in(&[3, 3, 0], 16, 2)));
        assert!(!hole.contains_cube(index_in(&[2, 8, 0], 16, 2)));
    }

    #[test]
    fn generation_is_monotone_and_separated() {
        for layers in [1, 5] {
            let r = generation_monotonicity(&CubeLattice::new(2, 3).unwrap(), layers).unwrap();
            assert_eq!(r.violations, 0);
            assert_eq!(r.separation_failures, 0);
            assert!(r.pairs > 0);
        }
        let r = generation_monotonicity(&CubeLattice::new(1, 12).unwrap(), 2).unwrap();
        assert_eq!((r.violations, r.separation_failures), (0, 0));
    }

    #[test]
    fn separation_on_bigger_grid() {
        let lat = CubeLattice::new(2, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let lb: CubeMask = lat.full() & !(0..121).filter(|_| rng.gen_bool(0.02)).fold(0, |m, c| m | (1 << c));
            let p: CubeMask = (0..121).filter(|_| rng.gen_bool(0.02)).fold(0, |m, c| m | (1 << c)) & lb;
            let om = next_small_region(&lat, lb, p, 2);
            assert!(validate_separation(&lat, lb, om, 2));
            assert_eq!(om & lat.star(p, 2), 0);
        }
    }

    #[test]
    fn partition_identities_are_exact() {
        for kind in IdentityKind::ALL {
            let r = partition_identity(kind, &small_cfg(12)).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.good_fraction > 0.05 && r.good_fraction < 0.95, "{r:?}");
        }
    }

    #[test]
    fn identities_with_one_layer() {
        let cfg = PartitionConfig { layers: 1, samples: 10, ..Default::default() };
        for kind in IdentityKind::ALL {
            assert!(partition_identity(kind, &cfg).unwrap().passed());
        }
    }

    #[test]
    fn tiny_fields_leave_only_the_empty_large_region() {
        let setup = IdentitySetup::new(&small_cfg(1)).unwrap();
        let good = setup.lat.full();
        let mut total = 0;
        let mut hits = Vec::new();
        for q in submasks(good) {
            let t = zeta(good, q) * chi(good, good & !q);
            total += t;
            if t != 0 {
                hits.push(q);
            }
        }
        assert_eq!((total, hits), (1, vec![0]));
    }

    #[test]
    fn subset_cap_is_enforced() {
        let cfg = PartitionConfig { cubes: 4, ..Default::default() };
        assert!(matches!(partition_identity(IdentityKind::Level0, &cfg), Err(Error::Cap(_)) | Err(Error::Geometry(_))));
    }

    #[test]
    fn zero_fields_are_members() {
        let g = LatticeGeometry::with_side(2, 2, 1, 1, 8).unwrap();
        let cover = CubeCover::new(&g, 4, 1, 1).unwrap();
        let spec = SmallFieldSpec::new(1.0, 0.5);
        let m = membership(&cover, &spec, 0, &vec![0.0; g.n_blocks(1)], &vec![0.0; g.n_sites()]);
        assert!(m.member);
        assert_eq!(m.slack.field, 2.0);
    }

    #[test]
    fn threshold_ties_are_members() {
        let g = LatticeGeometry::with_side(2, 1, 0, 1, 8).unwrap();
        let cover = CubeCover::new(&g, 2, 0, 1).unwrap();
        let spec = SmallFieldSpec::new(1.0, 0.5);
        let phi = vec![2.0, 2.0, 1.0, 1.0, 0.0, 0.0, 1.0, 2.0];
        let big: Vec<f64> = phi.iter().map(|x| x + 1.0).collect();
        let m = membership_region(&cover, &spec, &[0, 1, 2, 3], &big, &phi);
        assert!(m.member);
        assert_eq!((m.slack.diff, m.slack.grad, m.slack.field), (0.0, 0.0, 0.0));
        let worse: Vec<f64> = big.iter().map(|x| x + 1e-12).collect();
        assert!(!membership_region(&cover, &spec, &[0, 1, 2, 3], &worse, &phi).member);
    }

    #[test]
    fn small_sets_sit_inside_the_analytic_slice() {
        let mut cs = CouplingState::new((-200f64).exp(), 0.5, 2, 3).unwrap();
        cs.delta = 0.2;
        let s = SmallFieldSpec::small(&cs, 3);
        let a = SmallFieldSpec::analytic(&cs, 3, cs.delta);
        assert!(s.within(&a));
        let g = LatticeGeometry::with_side(2, 1, 1, 1, 32).unwrap();
        let seq = RegionSequence::full(&g).unwrap();
        let params = ActionParams::new(1.0, 2, 1, 0.0, 1);
        let cover = CubeCover::new(&g, 4, 1, 1).unwrap();
        let cubes: Vec<usize> = (0..cover.n_cubes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut members = 0;
        for _ in 0..30 {
            let f = rng.gen_range(0.2..3.0);
            let big = smooth_unit_field(&mut rng, &g, 1, s.field, s.grad, f);
            let phi = minimizer(&g, &seq, &params, &DVector::from_vec(big.clone()), &DVector::zeros(g.n_sites())).unwrap();
            if membership_region(&cover, &s, &cubes, &big, phi.as_slice()).member {
                members += 1;
                assert!(membership_region(&cover, &a, &cubes, &big, phi.as_slice()).member);
            }
        }
        assert!(members > 0);
    }

    #[test]
    fn enforcement_bounds_hold() {
        let r = enforcement_suite(&EnforcementConfig { samples: 60, ..Default::default() }).unwrap();
        assert!(r.admitted > 5, "{r:?}");
        assert!(r.violators > 0, "{r:?}");
        assert!(r.derived_bounds_hold(), "{r:?}");
        assert!(r.converse_constant.is_finite() && r.converse_constant > 0.0);
        assert!(r.phi_sharp.0 > 0.0 && r.phi_sharp.1.is_finite());
        assert!(r.w_measured <= r.w_chain_bound);
    }
}

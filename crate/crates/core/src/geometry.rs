//! Periodic multiscale lattices, site sets, cube regions and distances.
//!
//! Everything lives in index space at the current level `k`: the fine lattice
//! has spacing `L^-k`, and a field component tied to level `j` lives on blocks
//! of `L^j` fine sites per side.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;
pub type Coords = [usize; MAX_DIM];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeGeometry {
    /// Block side.
    pub l: usize,
    /// Cube side exponent, `M = L^m`.
    pub m: u32,
    /// UV depth, used only for coupling bookkeeping.
    pub nlevels: u32,
    /// Period exponent of the unit lattice.
    pub mvol: u32,
    pub d: usize,
    pub k: u32,
}

impl LatticeGeometry {
    pub fn new(l: usize, m: u32, nlevels: u32, mvol: u32, d: usize, k: u32) -> Result<Self> {
        if l < 2 {
            return Err(Error::Geometry(format!("L = {l} must be at least 2")));
        }
        if d == 0 || d > MAX_DIM {
            return Err(Error::Geometry(format!("dimension {d} outside 1..=3")));
        }
        let g = LatticeGeometry { l, m, nlevels, mvol, d, k };
        if g.n_sites() > 1 << 22 {
            return Err(Error::Geometry(format!("{} sites is too many", g.n_sites())));
        }
        Ok(g)
    }

    /// Geometry with a given number of fine sites per side; `side` must be `L^(mvol+k)`.
    pub fn with_side(l: usize, d: usize, k: u32, m: u32, side: usize) -> Result<Self> {
        let mut p = 0u32;
        let mut s = 1usize;
        while s < side {
            s *= l;
            p += 1;
        }
        if s != side || p < k {
            return Err(Error::Geometry(format!("side {side} is not L^(p+k) for L = {l}, k = {k}")));
        }
        Self::new(l, m, k, p - k, d, k)
    }

    pub fn side(&self) -> usize {
        self.l.pow(self.mvol + self.k)
    }

    pub fn n_sites(&self) -> usize {
        self.side().pow(self.d as u32)
    }

    pub fn big_m(&self) -> usize {
        self.l.pow(self.m)
    }

    pub fn spacing(&self) -> f64 {
        (self.l as f64).powi(-(self.k as i32))
    }

    /// Volume element `eta^d` of one fine site.
    pub fn site_weight(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    pub fn block_side(&self, j: u32) -> usize {
        self.l.pow(j)
    }

    /// Side, in fine sites, of the cubes that make up `Omega_j`.
    pub fn cube_side(&self, j: u32) -> usize {
        self.big_m() * self.l.pow(j)
    }

    /// Field scaling factor `L^{-(d-2)/2}`.
    pub fn scale_factor(&self) -> f64 {
        (self.l as f64).powf(-(self.d as f64 - 2.0) / 2.0)
    }

    pub fn coords(&self, i: usize) -> Coords {
        coords_in(i, self.side(), self.d)
    }

    pub fn index(&self, c: &Coords) -> usize {
        index_in(c, self.side(), self.d)
    }

    pub fn shift(&self, i: usize, mu: usize, delta: isize) -> usize {
        let n = self.side() as isize;
        let mut c = self.coords(i);
        c[mu] = (c[mu] as isize + delta).rem_euclid(n) as usize;
        self.index(&c)
    }

    pub fn sup_dist(&self, a: usize, b: usize) -> usize {
        let (ca, cb) = (self.coords(a), self.coords(b));
        (0..self.d).map(|mu| torus_gap(ca[mu], cb[mu], self.side())).max().unwrap_or(0)
    }

    pub fn n_blocks(&self, j: u32) -> usize {
        (self.side() / self.block_side(j)).pow(self.d as u32)
    }

    pub fn block_of(&self, i: usize, j: u32) -> usize {
        let bs = self.block_side(j);
        let mut c = self.coords(i);
        for x in c.iter_mut().take(self.d) {
            *x /= bs;
        }
        index_in(&c, self.side() / bs, self.d)
    }

    /// Fine sites of block `b` at level `j`, lexicographic.
    pub fn block_sites(&self, b: usize, j: u32) -> Vec<usize> {
        let bs = self.block_side(j);
        let origin = coords_in(b, self.side() / bs, self.d);
        box_points(self.d, bs)
            .into_iter()
            .map(|off| {
                let mut c = [0; MAX_DIM];
                for mu in 0..self.d {
                    c[mu] = origin[mu] * bs + off[mu];
                }
                self.index(&c)
            })
            .collect()
    }

    pub fn check_divides(&self, side: usize) -> Result<()> {
        if side == 0 || self.side() % side != 0 {
            return Err(Error::Geometry(format!("side {side} does not divide period {}", self.side())));
        }
        Ok(())
    }
}

pub fn coords_in(mut i: usize, side: usize, d: usize) -> Coords {
    let mut c = [0; MAX_DIM];
    for x in c.iter_mut().take(d) {
        *x = i % side;
        i /= side;
    }
    c
}

pub fn index_in(c: &Coords, side: usize, d: usize) -> usize {
    let mut i = 0;
    for mu in (0..d).rev() {
        i = i * side + c[mu];
    }
    i
}

pub fn torus_gap(a: usize, b: usize, n: usize) -> usize {
    let g = a.abs_diff(b);
    g.min(n - g)
}

/// All points of `{0..n}^d`, lexicographic with the first axis fastest.
pub fn box_points(d: usize, n: usize) -> Vec<Coords> {
    (0..n.pow(d as u32)).map(|i| coords_in(i, n, d)).collect()
}

/// King-move offsets (all `3^d - 1` nonzero offsets in `{-1,0,1}^d`).
pub fn king_offsets(d: usize) -> Vec<[isize; MAX_DIM]> {
    box_points(d, 3)
        .into_iter()
        .map(|c| {
            let mut o = [0isize; MAX_DIM];
            for mu in 0..d {
                o[mu] = c[mu] as isize - 1;
            }
            o
        })
        .filter(|o| o.iter().any(|&x| x != 0))
        .collect()
}

fn offset_index(c: &Coords, o: &[isize; MAX_DIM], side: usize, d: usize) -> usize {
    let mut t = [0; MAX_DIM];
    for mu in 0..d {
        t[mu] = (c[mu] as isize + o[mu]).rem_euclid(side as isize) as usize;
    }
    index_in(&t, side, d)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SiteSet {
    mask: Vec<bool>,
}

impl SiteSet {
    pub fn empty(n: usize) -> Self {
        SiteSet { mask: vec![false; n] }
    }

    pub fn full(n: usize) -> Self {
        SiteSet { mask: vec![true; n] }
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        SiteSet { mask }
    }

    pub fn from_indices(n: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(n);
        for i in idx {
            s.mask[i] = true;
        }
        s
    }

    pub fn universe(&self) -> usize {
        self.mask.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn insert(&mut self, i: usize) {
        self.mask[i] = true;
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn complement(&self) -> Self {
        SiteSet { mask: self.mask.iter().map(|b| !b).collect() }
    }

    pub fn union(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a || b)
    }

    pub fn intersect(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a && b)
    }

    pub fn minus(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a && !b)
    }

    pub fn is_subset(&self, o: &Self) -> bool {
        self.mask.iter().zip(&o.mask).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, o: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.mask.len(), o.mask.len(), "site sets over different lattices");
        SiteSet { mask: self.mask.iter().zip(&o.mask).map(|(&a, &b)| f(a, b)).collect() }
    }
}

/// Multi-source sup-metric distances on the periodic lattice, in sites.
pub fn sup_distance_field(geom: &LatticeGeometry, sources: &SiteSet) -> Vec<Option<usize>> {
    let n = geom.n_sites();
    let side = geom.side();
    let offs = king_offsets(geom.d);
    let mut dist = vec![None; n];
    let mut frontier: Vec<usize> = sources.indices();
    for &s in &frontier {
        dist[s] = Some(0);
    }
    let mut step = 0;
    while !frontier.is_empty() {
        step += 1;
        let mut next = Vec::new();
        for &u in &frontier {
            let c = geom.coords(u);
            for o in &offs {
                let v = offset_index(&c, o, side, geom.d);
                if dist[v].is_none() {
                    dist[v] = Some(step);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    dist
}

/// Gap between two site sets seen as unions of closed unit cells, in fine sites.
/// `None` when either set is empty.
pub fn set_gap(geom: &LatticeGeometry, a: &SiteSet, b: &SiteSet) -> Option<usize> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let dist = sup_distance_field(geom, a);
    b.indices().into_iter().filter_map(|i| dist[i]).min().map(|m| m.saturating_sub(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleDirection {
    /// Refine: `k -> k+1`, values times `L^{-(d-2)/2}`.
    Up,
    /// Coarsen: the exact inverse of `Up`.
    Down,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub geom: LatticeGeometry,
    pub support: SiteSet,
    pub values: Vec<f64>,
}

impl Field {
    pub fn on_torus(geom: LatticeGeometry, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), geom.n_sites());
        let support = SiteSet::full(values.len());
        Field { geom, support, values }
    }

    pub fn restricted(geom: LatticeGeometry, support: SiteSet, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), geom.n_sites());
        for (i, v) in values.iter_mut().enumerate() {
            if !support.contains(i) {
                *v = 0.0;
            }
        }
        Field { geom, support, values }
    }

    pub fn constant(geom: LatticeGeometry, c: f64) -> Self {
        let n = geom.n_sites();
        Self::on_torus(geom, vec![c; n])
    }

    /// `L^{-dk} sum |f|^2` over `support ∩ omega`.
    pub fn weighted_norm_sq(&self, omega: &SiteSet) -> f64 {
        self.geom.site_weight() * self.unweighted_norm_sq(omega)
    }

    pub fn unweighted_norm_sq(&self, omega: &SiteSet) -> f64 {
        (0..self.values.len())
            .filter(|&i| self.support.contains(i) && omega.contains(i))
            .map(|i| self.values[i] * self.values[i])
            .sum()
    }
}

/// `f_L(x) = L^{-(d-2)/2} f(x/L)`; in index space only the level and the values change.
pub fn scale_field(f: &Field, dir: ScaleDirection) -> Result<Field> {
    if !f.support.is_full() {
        return Err(Error::Precondition("scaling needs a field on the full torus".into()));
    }
    let mut g = f.geom.clone();
    let s = g.scale_factor();
    let factor = match dir {
        ScaleDirection::Up => {
            if g.mvol == 0 {
                return Err(Error::Geometry("period already one unit".into()));
            }
            g.mvol -= 1;
            g.k += 1;
            s
        }
        ScaleDirection::Down => {
            if g.k == 0 {
                return Err(Error::Geometry("already on the unit lattice".into()));
            }
            g.mvol += 1;
            g.k -= 1;
            1.0 / s
        }
    };
    let values = f.values.iter().map(|v| v * factor).collect();
    Ok(Field::on_torus(g, values))
}

/// A union of axis-aligned cubes of one scale on the periodic cube grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub cube_side: usize,
    pub grid: usize,
    pub d: usize,
    cubes: Vec<bool>,
}

impl Region {
    pub fn empty(geom: &LatticeGeometry, cube_side: usize) -> Result<Self> {
        geom.check_divides(cube_side)?;
        let grid = geom.side() / cube_side;
        Ok(Region { cube_side, grid, d: geom.d, cubes: vec![false; grid.pow(geom.d as u32)] })
    }

    pub fn full(geom: &LatticeGeometry, cube_side: usize) -> Result<Self> {
        let mut r = Self::empty(geom, cube_side)?;
        r.cubes.iter_mut().for_each(|c| *c = true);
        Ok(r)
    }

    pub fn from_cubes(geom: &LatticeGeometry, cube_side: usize, cubes: &[Coords]) -> Result<Self> {
        let mut r = Self::empty(geom, cube_side)?;
        for c in cubes {
            if (0..r.d).any(|mu| c[mu] >= r.grid) {
                return Err(Error::Geometry(format!("cube {c:?} off the grid")));
            }
            let i = index_in(c, r.grid, r.d);
            r.cubes[i] = true;
        }
        Ok(r)
    }

    /// Cubes with grid coordinates in the half-open box `[lo, hi)` (wrapping).
    pub fn cube_box(geom: &LatticeGeometry, cube_side: usize, lo: Coords, width: Coords) -> Result<Self> {
        let mut r = Self::empty(geom, cube_side)?;
        for off in box_points(r.d, r.grid) {
            if (0..r.d).all(|mu| (off[mu] + r.grid - lo[mu] % r.grid) % r.grid < width[mu]) {
                let i = index_in(&off, r.grid, r.d);
                r.cubes[i] = true;
            }
        }
        Ok(r)
    }

    pub fn from_mask(cube_side: usize, grid: usize, d: usize, cubes: Vec<bool>) -> Self {
        assert_eq!(cubes.len(), grid.pow(d as u32));
        Region { cube_side, grid, d, cubes }
    }

    /// Cubes of the given side that meet `sites`.
    pub fn covering(geom: &LatticeGeometry, cube_side: usize, sites: &SiteSet) -> Result<Self> {
        let mut r = Self::empty(geom, cube_side)?;
        for i in sites.indices() {
            let c = r.cube_of_site(geom, i);
            r.cubes[c] = true;
        }
        Ok(r)
    }

    pub fn n_cubes(&self) -> usize {
        self.cubes.len()
    }

    pub fn count(&self) -> usize {
        self.cubes.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cubes.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.cubes.iter().all(|&b| b)
    }

    pub fn contains_cube(&self, c: usize) -> bool {
        self.cubes[c]
    }

    pub fn cube_indices(&self) -> Vec<usize> {
        (0..self.cubes.len()).filter(|&c| self.cubes[c]).collect()
    }

    pub fn cube_mask(&self) -> &[bool] {
        &self.cubes
    }

    pub fn cube_of_site(&self, geom: &LatticeGeometry, i: usize) -> usize {
        let mut c = geom.coords(i);
        for x in c.iter_mut().take(self.d) {
            *x /= self.cube_side;
        }
        index_in(&c, self.grid, self.d)
    }

    pub fn cube_sites(&self, geom: &LatticeGeometry, cube: usize) -> Vec<usize> {
        let origin = coords_in(cube, self.grid, self.d);
        box_points(self.d, self.cube_side)
            .into_iter()
            .map(|off| {
                let mut c = [0; MAX_DIM];
                for mu in 0..self.d {
                    c[mu] = origin[mu] * self.cube_side + off[mu];
                }
                geom.index(&c)
            })
            .collect()
    }

    pub fn site_set(&self, geom: &LatticeGeometry) -> SiteSet {
        let n = geom.n_sites();
        let mask = (0..n).map(|i| self.cubes[self.cube_of_site(geom, i)]).collect();
        SiteSet::from_mask(mask)
    }

    pub fn complement(&self) -> Self {
        let mut r = self.clone();
        r.cubes.iter_mut().for_each(|c| *c = !*c);
        r
    }

    fn same_scale(&self, o: &Self) {
        assert!(self.cube_side == o.cube_side && self.grid == o.grid, "regions at different scales");
    }

    pub fn union(&self, o: &Self) -> Self {
        self.same_scale(o);
        let mut r = self.clone();
        r.cubes.iter_mut().zip(&o.cubes).for_each(|(a, b)| *a |= *b);
        r
    }

    pub fn intersect(&self, o: &Self) -> Self {
        self.same_scale(o);
        let mut r = self.clone();
        r.cubes.iter_mut().zip(&o.cubes).for_each(|(a, b)| *a &= *b);
        r
    }

    pub fn minus(&self, o: &Self) -> Self {
        self.same_scale(o);
        let mut r = self.clone();
        r.cubes.iter_mut().zip(&o.cubes).for_each(|(a, b)| *a &= !*b);
        r
    }

    pub fn is_subset(&self, o: &Self) -> bool {
        self.same_scale(o);
        self.cubes.iter().zip(&o.cubes).all(|(&a, &b)| !a || b)
    }

    /// `X` enlarged by `n` layers of cubes (sup metric, periodic).
    pub fn enlarge(&self, n: usize) -> Self {
        let offs = king_offsets(self.d);
        let mut cur = self.clone();
        for _ in 0..n {
            let mut next = cur.clone();
            for c in cur.cube_indices() {
                let cc = coords_in(c, self.grid, self.d);
                for o in &offs {
                    next.cubes[offset_index(&cc, o, self.grid, self.d)] = true;
                }
            }
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }

    /// `X^*`: enlargement by `r` layers.
    pub fn star(&self, r: usize) -> Self {
        self.enlarge(r)
    }

    /// `X^natural = ((X^c)^*)^c`: the cubes at least `r` layers inside `X`.
    pub fn natural(&self, r: usize) -> Self {
        self.complement().star(r).complement()
    }

    /// All cubes of the next coarser scale (side times `l`) that meet `X`.
    pub fn bar(&self, l: usize) -> Self {
        assert!(self.grid % l == 0, "coarse grid does not divide");
        let grid = self.grid / l;
        let mut cubes = vec![false; grid.pow(self.d as u32)];
        for c in self.cube_indices() {
            let mut cc = coords_in(c, self.grid, self.d);
            for x in cc.iter_mut().take(self.d) {
                *x /= l;
            }
            cubes[index_in(&cc, grid, self.d)] = true;
        }
        Region { cube_side: self.cube_side * l, grid, d: self.d, cubes }
    }

    /// Same point set expressed with cubes `l` times smaller.
    pub fn refine(&self, l: usize) -> Self {
        assert!(self.cube_side % l == 0, "cube side not divisible");
        let grid = self.grid * l;
        let cubes = (0..grid.pow(self.d as u32))
            .map(|c| {
                let mut cc = coords_in(c, grid, self.d);
                for x in cc.iter_mut().take(self.d) {
                    *x /= l;
                }
                self.cubes[index_in(&cc, self.grid, self.d)]
            })
            .collect();
        Region { cube_side: self.cube_side / l, grid, d: self.d, cubes }
    }

    /// Express at a smaller cube side that divides this one.
    pub fn at_side(&self, side: usize) -> Self {
        assert!(self.cube_side % side == 0, "target side must divide cube side");
        self.refine(self.cube_side / side)
    }
}

/// Nested regions `Omega_1 ⊃ ... ⊃ Omega_k`; `regions[j-1]` is `Omega_j`,
/// built from cubes of side `M L^j` fine sites.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSequence {
    pub regions: Vec<Region>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationLevel {
    pub j: usize,
    /// `None` means one of the two sets is empty and there is nothing to separate.
    pub achieved: Option<f64>,
    pub required: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationCertificate {
    pub levels: Vec<SeparationLevel>,
    pub passed: bool,
}

impl RegionSequence {
    pub fn new(geom: &LatticeGeometry, regions: Vec<Region>) -> Result<Self> {
        for (idx, r) in regions.iter().enumerate() {
            let j = idx as u32 + 1;
            if r.cube_side != geom.cube_side(j) {
                return Err(Error::Geometry(format!(
                    "Omega_{j} has cube side {} but needs {}",
                    r.cube_side,
                    geom.cube_side(j)
                )));
            }
        }
        let seq = RegionSequence { regions };
        let sets = seq.site_sets(geom);
        for w in sets.windows(2) {
            if !w[1].is_subset(&w[0]) {
                return Err(Error::Geometry("regions are not nested".into()));
            }
        }
        Ok(seq)
    }

    pub fn full(geom: &LatticeGeometry) -> Result<Self> {
        let regions = (1..=geom.k).map(|j| Region::full(geom, geom.cube_side(j))).collect::<Result<Vec<_>>>()?;
        Self::new(geom, regions)
    }

    pub fn depth(&self) -> usize {
        self.regions.len()
    }

    pub fn site_sets(&self, geom: &LatticeGeometry) -> Vec<SiteSet> {
        self.regions.iter().map(|r| r.site_set(geom)).collect()
    }

    /// `delta Omega_j = Omega_j - Omega_{j+1}`, with `delta Omega_k = Omega_k`.
    pub fn increments(&self, geom: &LatticeGeometry) -> Vec<SiteSet> {
        let sets = self.site_sets(geom);
        (0..sets.len())
            .map(|i| if i + 1 < sets.len() { sets[i].minus(&sets[i + 1]) } else { sets[i].clone() })
            .collect()
    }

    pub fn omega1(&self, geom: &LatticeGeometry) -> SiteSet {
        match self.regions.first() {
            Some(r) => r.site_set(geom),
            None => SiteSet::full(geom.n_sites()),
        }
    }

    /// Level of each site: `Some(j)` on `delta Omega_j`, `None` outside `Omega_1`.
    pub fn site_levels(&self, geom: &LatticeGeometry) -> Vec<Option<usize>> {
        let mut lv = vec![None; geom.n_sites()];
        for (idx, s) in self.increments(geom).iter().enumerate() {
            for i in s.indices() {
                lv[i] = Some(idx + 1);
            }
        }
        lv
    }

    /// Minimal buffer around `x` (a union of cubes of side `M L^k`): `R` layers per level.
    /// The flag is set when some level filled the whole torus.
    pub fn build_buffer(geom: &LatticeGeometry, x: &Region, r: usize) -> Result<(Self, bool)> {
        let k = geom.k as usize;
        if k == 0 {
            return Err(Error::Geometry("buffer needs k >= 1".into()));
        }
        if x.cube_side != geom.cube_side(k as u32) {
            return Err(Error::Geometry("buffer core must be made of M-cubes of the current level".into()));
        }
        let mut regions = vec![x.enlarge(r)];
        for _ in 1..k {
            let finer = regions.last().unwrap().refine(geom.l).enlarge(r);
            regions.push(finer);
        }
        regions.reverse();
        let saturated = regions.iter().any(|q| q.is_full());
        Ok((Self::new(geom, regions)?, saturated))
    }

    /// Checks `d(Omega_j^c, Omega_{j+1}) >= layers[j] * (M L^j)` fine sites for every level.
    pub fn validate_separation_with(&self, geom: &LatticeGeometry, layers: &[usize]) -> SeparationCertificate {
        let sets = self.site_sets(geom);
        let eta = geom.spacing();
        let mut levels = Vec::new();
        for j in 1..sets.len() {
            let outside = sets[j - 1].complement();
            let required = (layers[j - 1] * geom.cube_side(j as u32)) as f64 * eta;
            let achieved = set_gap(geom, &outside, &sets[j]).map(|g| g as f64 * eta);
            let pass = achieved.map_or(true, |a| a >= required - 1e-12);
            levels.push(SeparationLevel { j, achieved, required, pass });
        }
        let passed = levels.iter().all(|l| l.pass);
        SeparationCertificate { levels, passed }
    }

    pub fn validate_separation(&self, geom: &LatticeGeometry, r: usize) -> SeparationCertificate {
        self.validate_separation_with(geom, &vec![r; self.depth().max(1)])
    }

    /// Scaled distance from `x` to every site: paths with king moves, a step costing
    /// `eta * (w(u) + w(v)) / 2` with `w = L^{k-j}` on `delta Omega_j` and `L^k` outside `Omega_1`.
    pub fn scaled_distances(&self, geom: &LatticeGeometry, x: usize) -> Vec<f64> {
        let levels = self.site_levels(geom);
        let k = geom.k as i32;
        let w: Vec<f64> = levels
            .iter()
            .map(|lv| (geom.l as f64).powi(k - lv.map_or(0, |j| j as i32)))
            .collect();
        let eta = geom.spacing();
        let offs = king_offsets(geom.d);
        let side = geom.side();
        let mut dist = vec![f64::INFINITY; geom.n_sites()];
        let mut heap = BinaryHeap::new();
        dist[x] = 0.0;
        heap.push(HeapItem(0.0, x));
        while let Some(HeapItem(du, u)) = heap.pop() {
            if du > dist[u] {
                continue;
            }
            let c = geom.coords(u);
            for o in &offs {
                let v = offset_index(&c, o, side, geom.d);
                let nd = du + 0.5 * eta * (w[u] + w[v]);
                if nd < dist[v] - 1e-15 {
                    dist[v] = nd;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
        dist
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// One slot of a multiscale field: a block of `L^j` fine sites at level `j`,
/// or a single exterior fine site when `level == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsEntry {
    pub level: usize,
    pub block: usize,
    pub sites: Vec<usize>,
}

/// Index map for multiscale fields `(Phi_{1, dOmega_1}, ..., Phi_{k, Omega_k})`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleLayout {
    pub entries: Vec<MsEntry>,
    pub site_weight: f64,
    pub depth: usize,
}

impl MultiscaleLayout {
    pub fn new(geom: &LatticeGeometry, seq: &RegionSequence, with_exterior: bool) -> Self {
        let mut entries = Vec::new();
        if with_exterior {
            for i in seq.omega1(geom).complement().indices() {
                entries.push(MsEntry { level: 0, block: i, sites: vec![i] });
            }
        }
        for (idx, inc) in seq.increments(geom).iter().enumerate() {
            let j = idx as u32 + 1;
            for b in 0..geom.n_blocks(j) {
                let sites = geom.block_sites(b, j);
                if inc.contains(sites[0]) {
                    debug_assert!(sites.iter().all(|&s| inc.contains(s)));
                    entries.push(MsEntry { level: j as usize, block: b, sites });
                }
            }
        }
        MultiscaleLayout { entries, site_weight: geom.site_weight(), depth: seq.depth() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inner-product weight `(L^j eta)^d` of each entry.
    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.sites.len() as f64 * self.site_weight).collect()
    }

    pub fn positions_at_level(&self, j: usize) -> Vec<usize> {
        (0..self.entries.len()).filter(|&p| self.entries[p].level == j).collect()
    }
}

/// Values on a [`MultiscaleLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleField {
    pub values: Vec<f64>,
}

impl MultiscaleField {
    pub fn component(&self, layout: &MultiscaleLayout, j: usize) -> Vec<(usize, f64)> {
        layout
            .entries
            .iter()
            .zip(&self.values)
            .filter(|(e, _)| e.level == j)
            .map(|(e, &v)| (e.block, v))
            .collect()
    }
}

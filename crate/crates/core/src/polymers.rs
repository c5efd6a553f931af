//! Polymers as bitmasks of cubes: enumeration (plain, with holes, multiscale),
//! tree lengths, tree distances and the exhaustive polymer sums.
//!
//! Cubes are axis boxes `[lo, lo + side]^d` in units of the finest cube, on a
//! torus of side `period` or in the open plane. A cube set is a `u64` mask, so a
//! graph holds at most 64 cubes.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub type CubeSet = u64;

/// Largest polymer size accepted by [`enumerate_polymers`].
pub const ENUM_CAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adjacency {
    /// Share a `(d-1)`-dimensional face piece.
    Face,
    /// Closed boxes intersect.
    Touch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cube {
    pub lo: Vec<i64>,
    pub side: i64,
}

#[derive(Clone, Debug)]
pub struct CubeGraph {
    pub d: usize,
    pub period: Option<i64>,
    pub cubes: Vec<Cube>,
    face: Vec<CubeSet>,
    touch: Vec<CubeSet>,
}

pub fn bit(i: usize) -> CubeSet {
    1u64 << i
}

pub fn members(s: CubeSet) -> impl Iterator<Item = usize> {
    let mut s = s;
    std::iter::from_fn(move || {
        if s == 0 {
            None
        } else {
            let i = s.trailing_zeros() as usize;
            s &= s - 1;
            Some(i)
        }
    })
}

pub fn size(s: CubeSet) -> usize {
    s.count_ones() as usize
}

impl CubeGraph {
    pub fn from_cubes(d: usize, period: Option<i64>, cubes: Vec<Cube>) -> Result<Self> {
        if cubes.is_empty() || cubes.len() > 64 {
            return Err(Error::Geometry(format!("{} cubes; need 1..=64", cubes.len())));
        }
        if cubes.iter().any(|c| c.lo.len() != d || c.side <= 0) {
            return Err(Error::Geometry("cube dimension or side mismatch".into()));
        }
        let n = cubes.len();
        let mut g = CubeGraph { d, period, cubes, face: vec![0; n], touch: vec![0; n] };
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (mut touching, mut flush) = (true, 0);
                for mu in 0..d {
                    let cd = g.center_gap2(i, j, mu);
                    let reach = g.cubes[i].side + g.cubes[j].side;
                    if cd > reach {
                        touching = false;
                    } else if cd == reach {
                        flush += 1;
                    }
                }
                if touching {
                    g.touch[i] |= bit(j);
                    if flush == 1 {
                        g.face[i] |= bit(j);
                    }
                }
            }
        }
        Ok(g)
    }

    /// Unit cubes filling an `n^d` box.
    pub fn grid(d: usize, n: usize, periodic: bool) -> Result<Self> {
        let cubes = (0..n.pow(d as u32))
            .map(|i| Cube { lo: unit_coords(i, n, d), side: 1 })
            .collect();
        Self::from_cubes(d, periodic.then_some(n as i64), cubes)
    }

    /// Coarse cubes of side `ratio`; those flagged in `refined` are split into
    /// `ratio^d` unit cubes.
    pub fn multiscale(d: usize, n_coarse: usize, ratio: usize, refined: &[bool], periodic: bool) -> Result<Self> {
        if refined.len() != n_coarse.pow(d as u32) {
            return Err(Error::Shape("refinement flags must cover the coarse grid".into()));
        }
        let r = ratio as i64;
        let mut cubes = Vec::new();
        for (i, &fine) in refined.iter().enumerate() {
            let base: Vec<i64> = unit_coords(i, n_coarse, d).iter().map(|c| c * r).collect();
            if fine {
                for j in 0..ratio.pow(d as u32) {
                    let off = unit_coords(j, ratio, d);
                    cubes.push(Cube { lo: base.iter().zip(&off).map(|(b, o)| b + o).collect(), side: 1 });
                }
            } else {
                cubes.push(Cube { lo: base, side: r });
            }
        }
        Self::from_cubes(d, periodic.then_some(n_coarse as i64 * r), cubes)
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn all(&self) -> CubeSet {
        if self.len() == 64 {
            u64::MAX
        } else {
            bit(self.len()) - 1
        }
    }

    pub fn neighbors(&self, i: usize, adj: Adjacency) -> CubeSet {
        match adj {
            Adjacency::Face => self.face[i],
            Adjacency::Touch => self.touch[i],
        }
    }

    /// Circular distance between doubled centers along `mu`.
    fn center_gap2(&self, i: usize, j: usize, mu: usize) -> i64 {
        let a = 2 * self.cubes[i].lo[mu] + self.cubes[i].side;
        let b = 2 * self.cubes[j].lo[mu] + self.cubes[j].side;
        circ(a - b, self.period.map(|p| 2 * p))
    }

    /// Sup-metric distance between centers.
    pub fn center_dist(&self, i: usize, j: usize) -> f64 {
        (0..self.d).map(|mu| self.center_gap2(i, j, mu)).max().unwrap_or(0) as f64 / 2.0
    }

    /// Sup-metric distance between the closed cubes.
    pub fn gap_dist(&self, i: usize, j: usize) -> f64 {
        (0..self.d)
            .map(|mu| (self.center_gap2(i, j, mu) - self.cubes[i].side - self.cubes[j].side).max(0))
            .max()
            .unwrap_or(0) as f64
            / 2.0
    }

    pub fn is_connected(&self, s: CubeSet, adj: Adjacency) -> bool {
        if s == 0 {
            return false;
        }
        self.reach(s & s.wrapping_neg(), s, adj) == s
    }

    /// Cubes of `within` reachable from `start`.
    fn reach(&self, start: CubeSet, within: CubeSet, adj: Adjacency) -> CubeSet {
        let mut seen = start & within;
        let mut frontier = seen;
        while frontier != 0 {
            let mut next = 0;
            for i in members(frontier) {
                next |= self.neighbors(i, adj);
            }
            frontier = next & within & !seen;
            seen |= frontier;
        }
        seen
    }

    pub fn components(&self, s: CubeSet, adj: Adjacency) -> Vec<CubeSet> {
        let mut rest = s;
        let mut out = Vec::new();
        while rest != 0 {
            let c = self.reach(rest & rest.wrapping_neg(), rest, adj);
            out.push(c);
            rest &= !c;
        }
        out
    }

    /// Cubes outside `s` sharing a face with it.
    pub fn face_boundary(&self, s: CubeSet) -> CubeSet {
        members(s).fold(0, |acc, i| acc | self.face[i]) & !s
    }

    /// Translation-reduced text form. Plane grids shift to the minimal corner; on
    /// a torus the lexicographically least translate is taken.
    pub fn canonical(&self, s: CubeSet) -> String {
        let pts: Vec<(Vec<i64>, i64)> = members(s).map(|i| (self.cubes[i].lo.clone(), self.cubes[i].side)).collect();
        if pts.is_empty() {
            return "empty".into();
        }
        let encode = |shift: &[i64]| -> Vec<(Vec<i64>, i64)> {
            let mut v: Vec<(Vec<i64>, i64)> = pts
                .iter()
                .map(|(lo, side)| {
                    let c = lo
                        .iter()
                        .zip(shift)
                        .map(|(x, s)| match self.period {
                            Some(p) => (x - s).rem_euclid(p),
                            None => x - s,
                        })
                        .collect();
                    (c, *side)
                })
                .collect();
            v.sort();
            v
        };
        let best = match self.period {
            None => {
                let shift: Vec<i64> = (0..self.d).map(|mu| pts.iter().map(|p| p.0[mu]).min().unwrap()).collect();
                encode(&shift)
            }
            Some(p) => (0..(p as usize).pow(self.d as u32))
                .map(|t| encode(&unit_coords(t, p as usize, self.d)))
                .min()
                .unwrap(),
        };
        best.iter()
            .map(|(c, side)| {
                let xs: Vec<String> = c.iter().map(|x| x.to_string()).collect();
                if *side == 1 {
                    format!("({})", xs.join(","))
                } else {
                    format!("({}|{})", xs.join(","), side)
                }
            })
            .collect()
    }
}

fn unit_coords(mut i: usize, n: usize, d: usize) -> Vec<i64> {
    let mut c = vec![0; d];
    for x in c.iter_mut() {
        *x = (i % n) as i64;
        i /= n;
    }
    c
}

fn circ(delta: i64, period: Option<i64>) -> i64 {
    match period {
        None => delta.abs(),
        Some(p) => {
            let r = delta.rem_euclid(p);
            r.min(p - r)
        }
    }
}

// ---------------------------------------------------------------- enumeration

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolymerKind {
    Connected,
    /// Connected and every hole (face component of the complement of `omega`)
    /// either inside or disjoint.
    ModHoles(CubeSet),
}

/// A graph whose nodes are groups of cubes, each with a size weight.
struct NodeGraph {
    nbr: Vec<u64>,
    cubes: Vec<CubeSet>,
}

impl NodeGraph {
    fn plain(g: &CubeGraph, adj: Adjacency) -> Self {
        NodeGraph { nbr: (0..g.len()).map(|i| g.neighbors(i, adj)).collect(), cubes: (0..g.len()).map(bit).collect() }
    }

    /// Each hole contracted to one node.
    fn contracted(g: &CubeGraph, adj: Adjacency, omega: CubeSet) -> Self {
        let mut cubes: Vec<CubeSet> = members(omega & g.all()).map(bit).collect();
        cubes.extend(holes(g, omega));
        let nbr = cubes
            .iter()
            .map(|&c| {
                let reach = members(c).fold(0, |acc, i| acc | g.neighbors(i, adj)) & !c;
                cubes.iter().enumerate().filter(|(_, &o)| o & reach != 0).fold(0u64, |acc, (j, _)| acc | bit(j))
            })
            .collect();
        NodeGraph { nbr, cubes }
    }

    /// Connected node sets whose least node is `root` and whose cube count is at
    /// most `cap`, by the untried-set recursion.
    fn from_root(&self, root: usize, cap: usize) -> Vec<CubeSet> {
        let mut out = Vec::new();
        let below = bit(root) - 1;
        self.grow(0, 0, bit(root), bit(root) | below, cap, &mut out);
        out
    }

    fn grow(&self, nodes: u64, weight: usize, mut untried: u64, seen: u64, cap: usize, out: &mut Vec<CubeSet>) {
        while untried != 0 {
            let v = untried.trailing_zeros() as usize;
            untried &= untried - 1;
            let w = weight + size(self.cubes[v]);
            if w > cap {
                continue;
            }
            let next = nodes | bit(v);
            out.push(members(next).fold(0, |acc, i| acc | self.cubes[i]));
            let fresh = self.nbr[v] & !seen;
            self.grow(next, w, untried | fresh, seen | fresh, cap, out);
        }
    }
}

/// Face components of the complement of `omega`.
pub fn holes(g: &CubeGraph, omega: CubeSet) -> Vec<CubeSet> {
    g.components(g.all() & !omega, Adjacency::Face)
}

pub fn is_mod_member(g: &CubeGraph, x: CubeSet, omega: CubeSet, adj: Adjacency) -> bool {
    g.is_connected(x, adj) && holes(g, omega).iter().all(|&h| h & x == 0 || h & !x == 0)
}

/// All polymers of at most `cap` cubes, sorted, by root-wise recursion.
pub fn enumerate_polymers(g: &CubeGraph, adj: Adjacency, cap: usize, kind: PolymerKind) -> Result<Vec<CubeSet>> {
    if cap > ENUM_CAP {
        return Err(Error::Cap(format!("size cap {cap} exceeds {ENUM_CAP}")));
    }
    let ng = match kind {
        PolymerKind::Connected => NodeGraph::plain(g, adj),
        PolymerKind::ModHoles(omega) => NodeGraph::contracted(g, adj, omega),
    };
    let mut all: Vec<CubeSet> =
        (0..ng.cubes.len()).into_par_iter().flat_map_iter(|r| ng.from_root(r, cap)).collect();
    all.sort_unstable();
    Ok(all)
}

/// Independent count: grow sets one neighbor at a time with hash deduplication.
pub fn enumerate_by_growth(g: &CubeGraph, adj: Adjacency, cap: usize, kind: PolymerKind) -> Result<Vec<CubeSet>> {
    if cap > ENUM_CAP {
        return Err(Error::Cap(format!("size cap {cap} exceeds {ENUM_CAP}")));
    }
    let mut found: HashSet<CubeSet> = HashSet::new();
    let mut layer: HashSet<CubeSet> = (0..g.len()).map(bit).collect();
    for _ in 0..cap {
        found.extend(layer.iter().copied());
        let mut next = HashSet::new();
        for &s in &layer {
            for i in members(s) {
                for j in members(g.neighbors(i, adj) & !s) {
                    next.insert(s | bit(j));
                }
            }
        }
        layer = next;
    }
    let mut out: Vec<CubeSet> = match kind {
        PolymerKind::Connected => found.into_iter().collect(),
        PolymerKind::ModHoles(omega) => {
            found.into_iter().filter(|&x| is_mod_member(g, x, omega, adj)).collect()
        }
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct PolymerRow {
    pub id: usize,
    pub size: usize,
    pub mask: u64,
    pub canonical: String,
}

pub fn polymer_rows(g: &CubeGraph, list: &[CubeSet]) -> Vec<PolymerRow> {
    list.iter()
        .enumerate()
        .map(|(id, &x)| PolymerRow { id, size: size(x), mask: x, canonical: g.canonical(x) })
        .collect()
}

// ------------------------------------------------------------- tree distances

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Exactness {
    Exact,
    Search,
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistMode {
    Plain,
    Mod(CubeSet),
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DistanceReport {
    /// Center-to-center tree length through cubes of `X` (touching adjacency).
    pub value: f64,
    /// A continuum lower bound for the same terminals.
    pub lower: f64,
    pub tag: Exactness,
}

/// Fewest cubes in a touch-connected set `S` with `terminals ⊆ S ⊆ within`,
/// by scanning optional subsets in order of size.
pub fn steiner_cubes(g: &CubeGraph, within: CubeSet, terminals: CubeSet) -> Option<usize> {
    if terminals == 0 {
        return Some(0);
    }
    let optional: Vec<usize> = members(within & !terminals).collect();
    if optional.len() > 24 {
        return None;
    }
    let mut best: Option<usize> = None;
    for sub in 0u64..(1u64 << optional.len()) {
        let extra = size(sub);
        if best.is_some_and(|b| size(terminals) + extra >= b) {
            continue;
        }
        let s = members(sub).fold(terminals, |acc, k| acc | bit(optional[k]));
        if g.is_connected(s, Adjacency::Touch) {
            best = Some(size(s));
        }
    }
    best
}

/// Same quantity via the terminal-subset dynamic program on hop distances.
pub fn steiner_cubes_dp(g: &CubeGraph, within: CubeSet, terminals: CubeSet) -> Option<usize> {
    let nodes: Vec<usize> = members(within).collect();
    let terms: Vec<usize> = members(terminals).collect();
    if terms.is_empty() {
        return Some(0);
    }
    if terms.len() > 14 {
        return None;
    }
    let n = nodes.len();
    let pos = |c: usize| nodes.iter().position(|&x| x == c).unwrap();
    const INF: usize = usize::MAX / 4;
    let mut dist = vec![vec![INF; n]; n];
    for a in 0..n {
        dist[a][a] = 0;
        let mut frontier = bit(nodes[a]);
        let mut seen = frontier;
        let mut hop = 0;
        while frontier != 0 {
            hop += 1;
            let mut next = 0;
            for i in members(frontier) {
                next |= g.neighbors(i, Adjacency::Touch);
            }
            frontier = next & within & !seen;
            seen |= frontier;
            for c in members(frontier) {
                dist[a][pos(c)] = hop;
            }
        }
    }
    let t = terms.len();
    let full = (1usize << t) - 1;
    let mut dp = vec![vec![INF; n]; full + 1];
    for (k, &c) in terms.iter().enumerate() {
        let p = pos(c);
        for v in 0..n {
            dp[1 << k][v] = dist[p][v];
        }
    }
    for s in 1..=full {
        if s.count_ones() < 2 {
            continue;
        }
        let mut merged = vec![INF; n];
        let mut sub = (s - 1) & s;
        while sub > 0 {
            for v in 0..n {
                merged[v] = merged[v].min(dp[sub][v] + dp[s ^ sub][v]);
            }
            sub = (sub - 1) & s;
        }
        for v in 0..n {
            dp[s][v] = (0..n).map(|u| merged[u] + dist[u][v]).min().unwrap();
        }
    }
    let edges = (0..n).map(|v| dp[full][v]).min().unwrap();
    (edges < INF).then_some(edges + 1)
}

/// `d_M(X)` or `d_M(X mod Omega^c)` in cube units via the graph surrogate.
pub fn distance_dm(g: &CubeGraph, x: CubeSet, mode: DistMode) -> Result<DistanceReport> {
    let terminals = match mode {
        DistMode::Plain => x,
        DistMode::Mod(omega) => x & omega,
    };
    if !g.is_connected(x, Adjacency::Touch) {
        return Err(Error::Precondition("distance needs a connected polymer".into()));
    }
    let unit = g.cubes.iter().all(|c| c.side == 1);
    if !unit {
        return Err(Error::Precondition("tree distance surrogate is defined on unit cubes".into()));
    }
    let nodes = steiner_cubes(g, x, terminals)
        .ok_or_else(|| Error::Cap("too many optional cubes for the Steiner scan".into()))?;
    let value = nodes.saturating_sub(1) as f64;
    let lower = steiner_lower(g, terminals);
    let tag = if (value - lower).abs() < 1e-12 { Exactness::Exact } else { Exactness::Surrogate };
    Ok(DistanceReport { value, lower, tag })
}

// ---------------------------------------------------------------- tree lengths

fn mst(n: usize, w: impl Fn(usize, usize) -> f64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let mut best = vec![f64::INFINITY; n];
    let mut used = vec![false; n];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let u = (0..n).filter(|&i| !used[i]).min_by(|&a, &b| best[a].total_cmp(&best[b])).unwrap();
        used[u] = true;
        total += best[u];
        for v in 0..n {
            if !used[v] {
                best[v] = best[v].min(w(u, v));
            }
        }
    }
    total
}

/// Minimal spanning tree length over centers.
pub fn ell_prime(g: &CubeGraph, y: CubeSet) -> f64 {
    let c: Vec<usize> = members(y).collect();
    mst(c.len(), |a, b| g.center_dist(c[a], c[b]))
}

/// Spanning tree bound using closed-cube gaps; every tree on points chosen in
/// the cubes is at least this long.
pub fn ell_gap_mst(g: &CubeGraph, y: CubeSet) -> f64 {
    let c: Vec<usize> = members(y).collect();
    mst(c.len(), |a, b| g.gap_dist(c[a], c[b]))
}

fn steiner_ratio(d: usize) -> f64 {
    match d {
        1 => 1.0,
        2 => 2.0 / 3.0,
        _ => 0.5,
    }
}

/// Lower bound on the continuum Steiner length through the cubes of `y`.
pub fn steiner_lower(g: &CubeGraph, y: CubeSet) -> f64 {
    let c: Vec<usize> = members(y).collect();
    let mut pair: f64 = 0.0;
    for a in 0..c.len() {
        for b in a + 1..c.len() {
            pair = pair.max(g.gap_dist(c[a], c[b]));
        }
    }
    pair.max(steiner_ratio(g.d) * ell_gap_mst(g, y))
}

/// Candidate points in doubled units: corners, face and edge midpoints, center.
fn candidates(g: &CubeGraph, i: usize) -> Vec<Vec<i64>> {
    let cube = &g.cubes[i];
    let k = 3usize.pow(g.d as u32);
    (0..k)
        .map(|t| {
            unit_coords(t, 3, g.d).iter().zip(&cube.lo).map(|(o, lo)| 2 * lo + o * cube.side).collect()
        })
        .collect()
}

fn point_dist2(g: &CubeGraph, a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| circ(x - y, g.period.map(|p| 2 * p))).max().unwrap_or(0)
}

/// Upper bound on the one-point-per-cube tree length: coordinate descent over
/// the candidate grid, then (when `exhaustive`) the full candidate product.
pub fn ell_search(g: &CubeGraph, y: CubeSet, exhaustive: bool) -> f64 {
    let c: Vec<usize> = members(y).collect();
    let cand: Vec<Vec<Vec<i64>>> = c.iter().map(|&i| candidates(g, i)).collect();
    let centre = cand[0].len() / 2;
    let eval = |choice: &[usize]| -> f64 {
        mst(c.len(), |a, b| point_dist2(g, &cand[a][choice[a]], &cand[b][choice[b]]) as f64) / 2.0
    };
    let mut choice = vec![centre; c.len()];
    let mut best = eval(&choice);
    loop {
        let mut improved = false;
        for a in 0..c.len() {
            for k in 0..cand[a].len() {
                let old = choice[a];
                choice[a] = k;
                let v = eval(&choice);
                if v < best - 1e-12 {
                    best = v;
                    improved = true;
                } else {
                    choice[a] = old;
                }
            }
        }
        if !improved {
            break;
        }
    }
    if exhaustive {
        let k = cand[0].len();
        let total = k.pow(c.len() as u32);
        for t in 0..total {
            let mut tt = t;
            for slot in choice.iter_mut() {
                *slot = tt % k;
                tt /= k;
            }
            best = best.min(eval(&choice));
        }
    }
    best
}

/// Steiner upper bound: best candidate tree with one extra free point on the
/// half-integer grid spanned by the cubes.
pub fn steiner_upper(g: &CubeGraph, y: CubeSet, ell_upper: f64) -> f64 {
    let c: Vec<usize> = members(y).collect();
    if c.len() < 3 {
        return ell_upper;
    }
    let cand: Vec<Vec<Vec<i64>>> = c.iter().map(|&i| candidates(g, i)).collect();
    let mut best = ell_upper;
    let lo: Vec<i64> = (0..g.d).map(|mu| c.iter().map(|&i| 2 * g.cubes[i].lo[mu]).min().unwrap()).collect();
    let hi: Vec<i64> =
        (0..g.d).map(|mu| c.iter().map(|&i| 2 * (g.cubes[i].lo[mu] + g.cubes[i].side)).max().unwrap()).collect();
    let span: Vec<usize> = lo.iter().zip(&hi).map(|(a, b)| (b - a + 1) as usize).collect();
    let count: usize = span.iter().product();
    for t in 0..count {
        let mut tt = t;
        let p: Vec<i64> = (0..g.d)
            .map(|mu| {
                let x = lo[mu] + (tt % span[mu]) as i64;
                tt /= span[mu];
                x
            })
            .collect();
        // a star around the free point with each cube at its nearest candidate,
        // then the spanning tree on cubes plus the point
        let near: Vec<&Vec<i64>> = cand
            .iter()
            .map(|cs| cs.iter().min_by_key(|q| point_dist2(g, q, &p)).unwrap())
            .collect();
        let n = c.len() + 1;
        let len = mst(n, |a, b| {
            let pa = if a == c.len() { &p } else { near[a] };
            let pb = if b == c.len() { &p } else { near[b] };
            point_dist2(g, pa, pb) as f64
        }) / 2.0;
        best = best.min(len);
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Holds,
    Violated,
    Uncertified,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TreeMetrics {
    pub ell_prime: f64,
    pub ell_lower: f64,
    pub ell_upper: f64,
    pub ell_tag: Exactness,
    pub tilde_lower: f64,
    pub tilde_upper: f64,
}

pub fn tree_lengths(g: &CubeGraph, y: CubeSet) -> Result<TreeMetrics> {
    let m = quick_tree_lengths(g, y)?;
    Ok(refine_tree_lengths(g, y, m))
}

/// Brackets from spanning trees and coordinate descent only.
fn quick_tree_lengths(g: &CubeGraph, y: CubeSet) -> Result<TreeMetrics> {
    let n = size(y);
    if n == 0 || n > ENUM_CAP {
        return Err(Error::Cap(format!("tree lengths need 1..={ENUM_CAP} cubes, got {n}")));
    }
    let ell_prime = ell_prime(g, y);
    let ell_lower = ell_gap_mst(g, y);
    let ell_upper = ell_search(g, y, false).min(ell_prime);
    let tilde_lower = steiner_lower(g, y);
    let tilde_upper = steiner_upper(g, y, ell_upper);
    let ell_tag = if ell_upper == ell_lower { Exactness::Exact } else { Exactness::Surrogate };
    Ok(TreeMetrics { ell_prime, ell_lower, ell_upper, ell_tag, tilde_lower, tilde_upper })
}

/// Full candidate search (up to five cubes) and the packing bound.
fn refine_tree_lengths(g: &CubeGraph, y: CubeSet, mut m: TreeMetrics) -> TreeMetrics {
    let n = size(y);
    if m.ell_upper > m.ell_lower && n <= 5 {
        m.ell_upper = m.ell_upper.min(ell_search(g, y, true));
        m.tilde_upper = m.tilde_upper.min(m.ell_upper);
        m.ell_tag = if m.ell_upper == m.ell_lower { Exactness::Exact } else { Exactness::Search };
    }
    m.tilde_lower = m.tilde_lower.max(packing_lower(g, y));
    m
}

/// Lower bound on any tree meeting every cube of `y`: touching cubes are merged
/// into clusters, and disjoint neighborhoods of radii `r_i` with
/// `r_i + r_j <= gap_ij` each hold a piece of the tree of length `r_i`. The
/// best radii solve a small packing program, done here by vertex enumeration.
pub fn packing_lower(g: &CubeGraph, y: CubeSet) -> f64 {
    let clusters = g.components(y, Adjacency::Touch);
    let m = clusters.len();
    if m < 2 || m > 8 {
        return 0.0;
    }
    let gap = |a: CubeSet, b: CubeSet| {
        members(a).flat_map(|i| members(b).map(move |j| (i, j))).map(|(i, j)| g.gap_dist(i, j)).fold(f64::INFINITY, f64::min)
    };
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..m {
        let mut r = vec![0.0; m];
        r[i] = -1.0;
        rows.push((r, 0.0));
    }
    for i in 0..m {
        for j in i + 1..m {
            let mut r = vec![0.0; m];
            r[i] = 1.0;
            r[j] = 1.0;
            rows.push((r, gap(clusters[i], clusters[j])));
        }
    }
    let mut best: f64 = 0.0;
    let k = rows.len();
    let mut pick: Vec<usize> = (0..m).collect();
    loop {
        let a = nalgebra::DMatrix::from_fn(m, m, |r, c| rows[pick[r]].0[c]);
        let b = nalgebra::DVector::from_fn(m, |r, _| rows[pick[r]].1);
        if let Some(x) = a.lu().solve(&b) {
            let feasible = rows.iter().all(|(r, rhs)| r.iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>() <= rhs + 1e-9);
            if feasible {
                best = best.max(x.sum());
            }
        }
        // next combination of m rows out of k
        let mut i = m;
        while i > 0 && pick[i - 1] == k - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        pick[i - 1] += 1;
        for j in i..m {
            pick[j] = pick[j - 1] + 1;
        }
    }
    // the vertex solve leaves round-off; lengths here are multiples of 1/2
    (best * 2.0 + 1e-9).floor() / 2.0
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LemmaCheck {
    pub chain: bool,
    pub double_steiner: Verdict,
    pub centers_vs_points: Verdict,
    pub count_vs_length: Verdict,
}

/// The three tree-length bounds for `y`, decided from the brackets.
pub fn check_tree_lemma(g: &CubeGraph, y: CubeSet, m: &TreeMetrics) -> LemmaCheck {
    let n = size(y) as f64;
    let decide = |holds: bool, violated: bool| {
        if holds {
            Verdict::Holds
        } else if violated {
            Verdict::Violated
        } else {
            Verdict::Uncertified
        }
    };
    let cap3 = 4.0 * (2f64.powi(g.d as i32) + 1.0);
    LemmaCheck {
        chain: m.tilde_lower <= m.ell_upper + 1e-12
            && m.ell_lower <= m.ell_prime + 1e-12
            && m.tilde_lower <= m.tilde_upper + 1e-12,
        double_steiner: decide(m.ell_upper <= 2.0 * m.tilde_lower + 1e-12, m.ell_lower > 2.0 * m.tilde_upper + 1e-12),
        centers_vs_points: decide(m.ell_prime <= m.ell_lower + n + 1e-12, m.ell_prime > m.ell_upper + n + 1e-12),
        count_vs_length: decide(n <= cap3 * (m.ell_lower + 1.0), n > cap3 * (m.ell_upper + 1.0)),
    }
}

impl LemmaCheck {
    fn settled(&self) -> bool {
        self.chain
            && self.double_steiner == Verdict::Holds
            && self.centers_vs_points == Verdict::Holds
            && self.count_vs_length == Verdict::Holds
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LemmaSummary {
    pub sets: usize,
    pub chain_failures: usize,
    /// `[holds, violated, uncertified]` per item.
    pub double_steiner: [usize; 3],
    pub centers_vs_points: [usize; 3],
    pub count_vs_length: [usize; 3],
}

impl LemmaSummary {
    fn add(&mut self, c: &LemmaCheck) {
        self.sets += 1;
        self.chain_failures += usize::from(!c.chain);
        for (slot, v) in [
            (&mut self.double_steiner, c.double_steiner),
            (&mut self.centers_vs_points, c.centers_vs_points),
            (&mut self.count_vs_length, c.count_vs_length),
        ] {
            slot[v as usize] += 1;
        }
    }

    fn merge(mut self, o: Self) -> Self {
        self.sets += o.sets;
        self.chain_failures += o.chain_failures;
        for k in 0..3 {
            self.double_steiner[k] += o.double_steiner[k];
            self.centers_vs_points[k] += o.centers_vs_points[k];
            self.count_vs_length[k] += o.count_vs_length[k];
        }
        self
    }

    pub fn all_hold(&self) -> bool {
        self.chain_failures == 0
            && self.double_steiner[0] == self.sets
            && self.centers_vs_points[0] == self.sets
            && self.count_vs_length[0] == self.sets
    }
}

/// Every set of up to `max_cubes` unit cubes in the open `d`-dimensional
/// lattice whose bounding box fits in `window^d`, one per translation class.
pub fn tree_lemma_exhaustive(d: usize, window: usize, max_cubes: usize) -> Result<LemmaSummary> {
    let g = CubeGraph::grid(d, window, false)?;
    let n = g.len();
    if n > 30 {
        return Err(Error::Cap(format!("window of {n} cubes is too large")));
    }
    let touches_lo = |s: CubeSet, mu: usize| members(s).any(|i| g.cubes[i].lo[mu] == 0);
    let sets: Vec<CubeSet> = (1u64..(1u64 << n))
        .into_par_iter()
        .filter(|&s| size(s) <= max_cubes && (0..d).all(|mu| touches_lo(s, mu)))
        .collect();
    let summary = sets
        .par_iter()
        .map(|&s| {
            let mut acc = LemmaSummary::default();
            let mut m = quick_tree_lengths(&g, s).expect("size within cap");
            let mut c = check_tree_lemma(&g, s, &m);
            if !c.settled() {
                m = refine_tree_lengths(&g, s, m);
                c = check_tree_lemma(&g, s, &m);
            }
            acc.add(&c);
            acc
        })
        .reduce(LemmaSummary::default, LemmaSummary::merge);
    Ok(summary)
}

// ----------------------------------------------------------------- sum bounds

/// Exact weighted counts: key is a length in half units (or a cube count).
pub type Histogram = BTreeMap<u64, u64>;

pub fn hist_sum(h: &Histogram, kappa: f64, scale: f64) -> f64 {
    h.iter().map(|(&k, &c)| c as f64 * (-kappa * k as f64 * scale).exp()).sum()
}

fn histogram_over<F>(n: usize, pred: F) -> Histogram
where
    F: Fn(CubeSet) -> Option<u64> + Sync,
{
    (1u64..(1u64 << n))
        .into_par_iter()
        .fold(Histogram::new, |mut h, s| {
            if let Some(k) = pred(s) {
                *h.entry(k).or_default() += 1;
            }
            h
        })
        .reduce(Histogram::new, |mut a, b| {
            for (k, c) in b {
                *a.entry(k).or_default() += c;
            }
            a
        })
}

/// Sizes of connected polymers containing cube `root`.
pub fn connected_size_histogram(g: &CubeGraph, root: usize) -> Result<Histogram> {
    guard_exhaustive(g)?;
    Ok(histogram_over(g.len(), |s| {
        (s & bit(root) != 0 && g.is_connected(s, Adjacency::Face)).then(|| size(s) as u64)
    }))
}

/// `|Y - X|` over `Y ⊇ X` whose every component contains a component of `X`.
pub fn primed_superset_histogram(g: &CubeGraph, x: CubeSet) -> Result<Histogram> {
    guard_exhaustive(g)?;
    let xc = g.components(x, Adjacency::Face);
    let free: Vec<usize> = members(g.all() & !x).collect();
    let mut h = Histogram::new();
    for sub in 0u64..(1u64 << free.len()) {
        let y = members(sub).fold(x, |acc, k| acc | bit(free[k]));
        let ok = g.components(y, Adjacency::Face).iter().all(|&c| xc.iter().any(|&k| k & c != 0));
        if ok {
            *h.entry(size(sub) as u64).or_default() += 1;
        }
    }
    Ok(h)
}

/// Doubled tree lengths over all `Y ∋ root`: `ell'` when `use_centers`, else the
/// searched point-tree length for `|Y| <= ENUM_CAP`. The searched length is an
/// upper bound, so that sum underestimates.
pub fn length_histogram(g: &CubeGraph, root: usize, use_centers: bool) -> Result<Histogram> {
    guard_exhaustive(g)?;
    Ok(histogram_over(g.len(), |s| {
        if s & bit(root) == 0 || (!use_centers && size(s) > ENUM_CAP) {
            return None;
        }
        let l = if use_centers { ell_prime(g, s) } else { ell_search(g, s, false).min(ell_prime(g, s)) };
        Some((2.0 * l).round() as u64)
    }))
}

/// Surrogate `d_M(X mod Omega^c)` over polymers with holes containing `root`,
/// through two enumerations: filtering all subsets, and contracted growth.
pub fn mod_distance_histograms(g: &CubeGraph, root: usize, omega: CubeSet) -> Result<(Histogram, Histogram)> {
    guard_exhaustive(g)?;
    let hs = holes(g, omega);
    let dist = |x: CubeSet| -> u64 {
        steiner_cubes(g, x, x & omega).expect("small optional set").saturating_sub(1) as u64
    };
    let filtered = histogram_over(g.len(), |s| {
        (s & bit(root) != 0
            && g.is_connected(s, Adjacency::Face)
            && hs.iter().all(|&h| h & s == 0 || h & !s == 0))
        .then(|| dist(s))
    });
    let ng = NodeGraph::contracted(g, Adjacency::Face, omega);
    let mut grown = Histogram::new();
    for r in 0..ng.cubes.len() {
        for x in ng.from_root(r, g.len()) {
            if x & bit(root) != 0 {
                *grown.entry(dist(x)).or_default() += 1;
            }
        }
    }
    Ok((filtered, grown))
}

fn guard_exhaustive(g: &CubeGraph) -> Result<()> {
    if g.len() > 20 {
        return Err(Error::Cap(format!("{} cubes is beyond exhaustive subset sums", g.len())));
    }
    Ok(())
}

/// Smallest `x` in `[lo, hi]` with `ok(x)`, assuming `ok` is monotone.
pub fn bisect_threshold(lo: f64, hi: f64, ok: impl Fn(f64) -> bool) -> Option<f64> {
    if !ok(hi) {
        return None;
    }
    let (mut a, mut b) = (lo, hi);
    if ok(a) {
        return Some(a);
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if ok(m) {
            b = m;
        } else {
            a = m;
        }
        if b - a < 1e-12 {
            break;
        }
    }
    Some(b)
}

/// Smallest grid point beyond which `ok` holds at every later grid point.
pub fn scan_threshold(grid: &[f64], ok: impl Fn(f64) -> bool) -> Option<f64> {
    let mut thr = None;
    for &x in grid.iter().rev() {
        if ok(x) {
            thr = Some(x);
        } else {
            break;
        }
    }
    thr
}

#[derive(Clone, Debug, Serialize)]
pub struct SumBoundsReport {
    pub connected_threshold: Option<f64>,
    pub primed_threshold: Option<f64>,
    pub primed_empty_lhs: f64,
    pub centers_threshold: Option<f64>,
    /// Point-tree sum over sets of at most `ENUM_CAP` cubes, which cannot drop
    /// below the number of sets of length zero.
    pub points_floor: f64,
    pub points_target: f64,
    pub points_threshold: Option<f64>,
    pub holes_threshold: Option<f64>,
    pub holes_enumerations_agree: bool,
    pub target: f64,
}

/// The four polymer sums on `g`, with measured thresholds. `neighbor_factor` is
/// the neighbor count bound `2 d L^{d-1}`; `target` the constant on the right of
/// the center and hole sums (the point-tree sum uses twice its floor when that
/// is larger).
pub fn sum_bounds_suite(
    g: &CubeGraph,
    root: usize,
    primed_x: CubeSet,
    hole_omega: CubeSet,
    neighbor_factor: f64,
    target: f64,
) -> Result<SumBoundsReport> {
    let conn = connected_size_histogram(g, root)?;
    let connected_threshold = bisect_threshold(0.0, 60.0, |k| hist_sum(&conn, k, 1.0) <= (-0.5 * k).exp());

    let primed = primed_superset_histogram(g, primed_x)?;
    let nx = size(primed_x) as f64;
    let rhs = |k: f64| ((-0.5 * k).exp() * (neighbor_factor + 1.0) * nx).exp();
    let grid: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.01).collect();
    let primed_threshold = scan_threshold(&grid, |k| hist_sum(&primed, k, 1.0) <= rhs(k) * (1.0 + 1e-12));
    let primed_empty_lhs = hist_sum(&primed_superset_histogram(g, 0)?, 1.0, 1.0);

    let centers = length_histogram(g, root, true)?;
    let gaps = length_histogram(g, root, false)?;
    let centers_threshold = bisect_threshold(0.0, 60.0, |a| hist_sum(&centers, a, 0.5) <= target);
    let points_floor = gaps.get(&0).copied().unwrap_or(0) as f64;
    let points_target = target.max(2.0 * points_floor);
    let points_threshold = bisect_threshold(0.0, 60.0, |a| hist_sum(&gaps, a, 0.5) <= points_target);

    let (filtered, grown) = mod_distance_histograms(g, root, hole_omega)?;
    let holes_threshold = bisect_threshold(0.0, 60.0, |k| hist_sum(&filtered, k, 1.0) <= target);
    Ok(SumBoundsReport {
        connected_threshold,
        primed_threshold,
        primed_empty_lhs,
        centers_threshold,
        points_floor,
        points_target,
        points_threshold,
        holes_threshold,
        holes_enumerations_agree: filtered == grown,
        target,
    })
}

// ------------------------------------------------------------------ misc

/// Labeled trees on `n` vertices by scanning all `(n-1)`-edge subsets.
pub fn count_labeled_trees(n: usize) -> u64 {
    if n <= 1 {
        return 1;
    }
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let m = edges.len();
    let mut count = 0;
    for s in 0u64..(1u64 << m) {
        if size(s) != n - 1 {
            continue;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        let mut acyclic = true;
        for e in members(s) {
            let (a, b) = edges[e];
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                acyclic = false;
                break;
            }
            parent[ra] = rb;
        }
        count += u64::from(acyclic);
    }
    count
}

/// Coarse cubes (of `coarse`) meeting the fine cubes of `x` (in `fine`).
pub fn reblock(fine: &CubeGraph, x: CubeSet, coarse: &CubeGraph) -> Result<CubeSet> {
    if fine.d != coarse.d || fine.period != coarse.period {
        return Err(Error::Geometry("reblocking needs matching dimension and period".into()));
    }
    let mut out = 0;
    for i in members(x) {
        let a = &fine.cubes[i];
        let hit = coarse.cubes.iter().position(|b| {
            (0..fine.d).all(|mu| {
                let off = a.lo[mu] - b.lo[mu];
                let off = match fine.period {
                    Some(p) => off.rem_euclid(p),
                    None => off,
                };
                off >= 0 && off + a.side <= b.side
            })
        });
        match hit {
            Some(j) => out |= bit(j),
            None => return Err(Error::Geometry("fine cube not inside a coarse cube".into())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(g: &CubeGraph, c: &[i64]) -> usize {
        g.cubes.iter().position(|q| q.lo == c).unwrap()
    }

    #[test]
    fn adjacency_on_grid() {
        let g = CubeGraph::grid(2, 4, true).unwrap();
        assert!(g.neighbors(0, Adjacency::Face).count_ones() == 4);
        assert!(g.neighbors(0, Adjacency::Touch).count_ones() == 8);
        let p = CubeGraph::grid(2, 4, false).unwrap();
        assert_eq!(p.neighbors(0, Adjacency::Face).count_ones(), 2);
        assert_eq!(p.neighbors(0, Adjacency::Touch).count_ones(), 3);
    }

    #[test]
    fn multiscale_adjacency_sees_small_cubes() {
        // coarse 2x2 of side 2, first coarse cube refined
        let g = CubeGraph::multiscale(2, 2, 2, &[true, false, false, false], false).unwrap();
        assert_eq!(g.len(), 7);
        let big_right = g.cubes.iter().position(|c| c.side == 2 && c.lo == vec![2, 0]).unwrap();
        let faces = size(g.neighbors(big_right, Adjacency::Face) & 0b1111);
        assert_eq!(faces, 2);
    }

    #[test]
    fn singletons_and_two_counts() {
        let g = CubeGraph::grid(2, 6, false).unwrap();
        let one = enumerate_polymers(&g, Adjacency::Face, 1, PolymerKind::Connected).unwrap();
        assert_eq!(one.len(), 36);
        let two = enumerate_polymers(&g, Adjacency::Face, 2, PolymerKind::Connected).unwrap();
        // horizontal and vertical dominoes
        assert_eq!(two.len() - 36, 2 * 6 * 5);
    }

    #[test]
    fn enumerations_agree() {
        let g = CubeGraph::grid(2, 6, false).unwrap();
        for cap in 1..=4 {
            let a = enumerate_polymers(&g, Adjacency::Face, cap, PolymerKind::Connected).unwrap();
            let b = enumerate_by_growth(&g, Adjacency::Face, cap, PolymerKind::Connected).unwrap();
            assert_eq!(a, b, "cap {cap}");
        }
        let t = CubeGraph::grid(2, 4, true).unwrap();
        let a = enumerate_polymers(&t, Adjacency::Touch, 4, PolymerKind::Connected).unwrap();
        let b = enumerate_by_growth(&t, Adjacency::Touch, 4, PolymerKind::Connected).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mod_holes_match_filter() {
        let g = CubeGraph::grid(2, 4, true).unwrap();
        let hole = bit(at(&g, &[1, 1])) | bit(at(&g, &[2, 1]));
        let omega = g.all() & !hole;
        let a = enumerate_polymers(&g, Adjacency::Face, 6, PolymerKind::ModHoles(omega)).unwrap();
        let b = enumerate_by_growth(&g, Adjacency::Face, 6, PolymerKind::ModHoles(omega)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x & hole == 0 || x & hole == hole));
        assert_eq!(a.iter().filter(|&&x| x == hole).count(), 1);
    }

    #[test]
    fn cap_is_enforced() {
        let g = CubeGraph::grid(1, 4, true).unwrap();
        assert!(enumerate_polymers(&g, Adjacency::Face, 9, PolymerKind::Connected).is_err());
    }

    #[test]
    fn steiner_methods_agree() {
        let g = CubeGraph::grid(2, 4, false).unwrap();
        for x in [0b1111u64, 0b1000_0100_0010_0001, 0b0110_1001_1001_0110, 0xF00F, 0x8421 | 0x0F00] {
            if !g.is_connected(x, Adjacency::Touch) {
                continue;
            }
            for t in [x, x & 0x00FF, x & 0xF0F0, x & 0x8001] {
                assert_eq!(steiner_cubes(&g, x, t), steiner_cubes_dp(&g, x, t), "x {x:#x} t {t:#x}");
            }
        }
    }

    #[test]
    fn mod_distance_through_hole() {
        let g = CubeGraph::grid(1, 5, false).unwrap();
        let x = 0b01110;
        let omega = g.all() & !0b00100;
        let plain = distance_dm(&g, x, DistMode::Plain).unwrap();
        let modd = distance_dm(&g, x, DistMode::Mod(omega)).unwrap();
        assert_eq!(plain.value, 2.0);
        assert_eq!(modd.value, 2.0);
        // the continuum tree only has to cross the hole
        assert_eq!(modd.lower, 1.0);
        assert!(modd.value <= plain.value);
        let single = distance_dm(&g, 0b1, DistMode::Plain).unwrap();
        assert_eq!(single.value, 0.0);
        assert_eq!(single.tag, Exactness::Exact);
        let inside = distance_dm(&g, 0b11, DistMode::Mod(omega)).unwrap();
        assert_eq!(inside.value, distance_dm(&g, 0b11, DistMode::Plain).unwrap().value);
    }

    #[test]
    fn touching_pair_lengths() {
        let g = CubeGraph::grid(2, 3, false).unwrap();
        let y = bit(0) | bit(1);
        let m = tree_lengths(&g, y).unwrap();
        assert_eq!(m.ell_prime, 1.0);
        assert_eq!(m.ell_lower, 0.0);
        assert_eq!(m.ell_upper, 0.0);
        assert_eq!(m.ell_tag, Exactness::Exact);
    }

    #[test]
    fn separated_pair_lengths() {
        let g = CubeGraph::grid(2, 5, false).unwrap();
        let y = bit(at(&g, &[0, 0])) | bit(at(&g, &[3, 1]));
        let m = tree_lengths(&g, y).unwrap();
        assert_eq!(m.ell_prime, 3.0);
        assert_eq!(m.ell_lower, 2.0);
        assert_eq!(m.ell_upper, 2.0);
        assert_eq!(m.tilde_lower, 2.0);
    }

    #[test]
    fn tree_lemma_small_window() {
        let s = tree_lemma_exhaustive(2, 4, 4).unwrap();
        assert!(s.all_hold(), "{s:?}");
    }

    #[test]
    fn cayley_counts() {
        for n in 1..=6u32 {
            let expect = if n <= 2 { 1 } else { (n as u64).pow(n - 2) };
            assert_eq!(count_labeled_trees(n as usize), expect);
        }
    }

    #[test]
    fn reblock_cover() {
        let fine = CubeGraph::grid(2, 4, false).unwrap();
        let coarse = CubeGraph::from_cubes(
            2,
            None,
            (0..4).map(|i| Cube { lo: unit_coords(i, 2, 2).iter().map(|c| 2 * c).collect(), side: 2 }).collect(),
        )
        .unwrap();
        let x = bit(at(&fine, &[1, 1])) | bit(at(&fine, &[2, 2])) | bit(at(&fine, &[1, 2]));
        assert_eq!(reblock(&fine, x, &coarse).unwrap(), 0b1101);
        let whole = bit(at(&fine, &[0, 0])) | bit(at(&fine, &[1, 0])) | bit(at(&fine, &[0, 1])) | bit(at(&fine, &[1, 1]));
        assert_eq!(reblock(&fine, whole, &coarse).unwrap(), 0b0001);
    }

    #[test]
    fn size_plus_distance_dominates() {
        let g = CubeGraph::grid(2, 3, false).unwrap();
        let list = enumerate_polymers(&g, Adjacency::Touch, 5, PolymerKind::Connected).unwrap();
        let d = |x| distance_dm(&g, x, DistMode::Plain).unwrap().value;
        for &z in &list {
            for &y in list.iter().filter(|&&y| y & !z == 0) {
                assert!(size(z & !y) as f64 + d(y) >= d(z));
            }
        }
    }

    #[test]
    fn empty_primed_sum_is_one() {
        let g = CubeGraph::grid(2, 3, true).unwrap();
        let h = primed_superset_histogram(&g, 0).unwrap();
        assert_eq!(hist_sum(&h, 1.0, 1.0), 1.0);
    }

    #[test]
    fn canonical_is_translation_invariant() {
        let g = CubeGraph::grid(2, 4, true).unwrap();
        let a = bit(at(&g, &[0, 0])) | bit(at(&g, &[1, 0]));
        let b = bit(at(&g, &[3, 2])) | bit(at(&g, &[0, 2]));
        assert_eq!(g.canonical(a), g.canonical(b));
        let p = CubeGraph::grid(2, 4, false).unwrap();
        assert_eq!(p.canonical(bit(5) | bit(6)), "(0,0)(1,0)");
    }
}
